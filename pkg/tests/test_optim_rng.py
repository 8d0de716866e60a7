"""Adam optimizer and counter-based RNG streams."""

import numpy as np
import pytest

from compwm import tensor as T
from compwm.optim import Adam, clip_global_norm
from compwm.rng import RngState
from compwm.tensor import NonFiniteError, Tensor


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert opt.t == 1


def test_first_step_magnitude_is_lr():
    # f(x) = x^2 at x=1: grad 2; bias-corrected first step is lr * g/|g|
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    assert abs(p.data[0] - 0.9) < 1e-6


def test_quadratic_converges():
    rng = RngState(11)
    target = rng.normal((6,))
    p = Tensor(np.zeros(6), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    first = None
    for _ in range(200):
        loss = T.tsum(T.square(T.sub(p, Tensor(target))))
        if first is None:
            first = loss.item()
        loss.backward()
        opt.step()
        opt.zero_grad()
    final = T.tsum(T.square(T.sub(p, Tensor(target)))).item()
    assert final < 1e-3 * first


def test_non_finite_grad_rejected():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        opt.step()


def test_clip_global_norm():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.full(4, 10.0)
    norm = clip_global_norm({"p": p}, max_norm=1.0)
    assert norm == 20.0
    assert abs(np.linalg.norm(p.grad) - 1.0) < 1e-12


def test_adam_state_roundtrip():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([0.5, -0.5])
    opt.step()
    arrays = opt.state_arrays("adam")
    opt2 = Adam({"p": Tensor(p.data.copy(), requires_grad=True)}, lr=0.01)
    opt2.load_state_arrays("adam", arrays)
    assert opt2.t == 1
    assert np.array_equal(opt2.m["p"], opt.m["p"])
    assert np.array_equal(opt2.v["p"], opt.v["p"])


def test_rng_same_state_same_draws():
    a = RngState(123, 5).normal((4, 3))
    b = RngState(123, 5).normal((4, 3))
    assert np.array_equal(a, b)


def test_rng_children_independent():
    base = RngState(123)
    a = base.child(1).normal((1000,))
    b = base.child(2).normal((1000,))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1
    assert base.child(1, 2) != base.child(2, 1)


def test_rng_one_hot_rows():
    rows = RngState(7).one_hot(4, (50,))
    assert rows.shape == (50, 4)
    assert np.array_equal(rows.sum(axis=1), np.ones(50))
    assert set(np.unique(rows)) <= {0.0, 1.0}
