"""Autodiff core: shapes, values, gradients, determinism."""

import math

import numpy as np
import pytest

from compwm import tensor as T
from compwm.rng import RngState
from compwm.tensor import (GraphError, NonFiniteError, ShapeMismatchError,
                           Tensor, grad_check)


def test_matmul_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert T.matmul(a, b).shape == (2, 4)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as e:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_tanh_of_zero_is_zero():
    out = T.tanh(Tensor(np.zeros((3, 2))))
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_softplus_at_zero_is_log_two():
    out = T.softplus(Tensor(np.zeros(4)))
    assert np.allclose(out.data, math.log(2.0), atol=1e-12)


def test_elementwise_broadcast_only_leading_batch():
    x = Tensor(np.ones((5, 3)))
    bias = Tensor(np.arange(3.0))
    assert T.add(x, bias).shape == (5, 3)
    with pytest.raises(ShapeMismatchError):
        T.add(Tensor(np.ones((5, 3))), Tensor(np.ones((5, 1))))


def test_nonfinite_result_names_op():
    with pytest.raises(NonFiniteError) as e:
        T.exp(Tensor(np.array([1000.0])))
    assert "exp" in str(e.value)


def test_log_of_negative_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([-1.0])))


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = T.tsum(T.square(x))
    out.backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_function_gives_zero_grads():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = T.add(T.tsum(T.mul(x, T.constant(0.0))), T.constant(5.0))
    out.backward()
    assert np.array_equal(x.grad, np.zeros(2))
    assert out.item() == 5.0


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        T.square(x).backward()


def test_backward_detached_output_rejected():
    with pytest.raises(GraphError):
        Tensor(np.array([1.0])).backward()


def test_backward_consumes_tape():
    x = Tensor(np.array([2.0]), requires_grad=True)
    out = T.tsum(T.square(x))
    out.backward()
    with pytest.raises(GraphError):
        out.backward()


def test_three_layer_network_matches_finite_differences():
    rng = RngState(7)
    w1 = rng.child(1).normal((4, 8))
    w2 = rng.child(2).normal((8, 8))
    w3 = rng.child(3).normal((8, 1))

    def fn(x):
        h = T.tanh(T.matmul(x, Tensor(w1)))
        h = T.tanh(T.matmul(h, Tensor(w2)))
        return T.tsum(T.matmul(h, Tensor(w3)))

    err = grad_check(fn, Tensor(rng.child(4).normal((3, 4))), step=1e-5)
    assert err < 1e-4


def test_grad_check_linear_is_exact():
    w = RngState(3).normal((6,))

    def fn(x):
        return T.tsum(T.mul(x, Tensor(w)))

    assert grad_check(fn, Tensor(RngState(4).normal((6,)))) < 1e-8


def test_grad_check_flags_wrong_gradient():
    # negative control: a custom op whose backward rule is scaled by 2
    def bad_square(x):
        def back(g):
            return (2.0 * (2.0 * x.data) * g,)
        return T.make_node(x.data * x.data, (x,), back, "bad_square")

    def fn(x):
        return T.tsum(bad_square(x))

    err = grad_check(fn, Tensor(np.array([1.0, -2.0, 3.0])))
    assert err > 1e-2


OPS = [
    ("add", lambda x: T.tsum(T.add(x, x))),
    ("sub", lambda x: T.tsum(T.sub(x, T.square(x)))),
    ("mul", lambda x: T.tsum(T.mul(x, x))),
    ("tanh", lambda x: T.tsum(T.tanh(x))),
    ("relu", lambda x: T.tsum(T.relu(x))),
    ("softplus", lambda x: T.tsum(T.softplus(x))),
    ("exp", lambda x: T.tsum(T.exp(x))),
    ("log", lambda x: T.tsum(T.log(T.add(T.square(x), T.constant(0.5))))),
    ("square", lambda x: T.tsum(T.square(x))),
    ("mean", lambda x: T.tmean(T.square(x))),
    ("sum0", lambda x: T.tsum(T.square(T.tsum(x, axis=0)))),
    ("mean0", lambda x: T.tsum(T.square(T.tmean(x, axis=0)))),
    ("narrow", lambda x: T.tsum(T.square(T.narrow(x, 1, 3)))),
    ("concat", lambda x: T.tsum(T.square(T.concat([x, T.tanh(x)])))),
    ("matmul", lambda x: T.tsum(T.square(T.matmul(x, T.tanh(x))))),
    ("clamp_max", lambda x: T.tsum(T.clamp_max(T.square(x), 1.5))),
]


@pytest.mark.parametrize("name,fn", OPS)
def test_grad_check_property_each_op(name, fn):
    # >=100 randomized cases across the op set
    for case in range(8):
        rng = RngState(1234, case).child(hash(name) & 0xFFFF)
        if name == "matmul":
            shape = (4, 4)  # x @ tanh(x) needs square operands
        else:
            shape = (int(rng.child(0).integers(2, 5)), 4)
        point = Tensor(rng.child(1).normal(shape))
        assert grad_check(fn, point, step=1e-5) < 1e-4, f"{name} case {case}"


def test_reparam_sample_gradients():
    noise = RngState(9).normal((3, 2))

    def fn(x):
        mean = T.narrow(x, 0, 2)
        std = T.softplus(T.narrow(x, 2, 4))
        return T.tsum(T.square(T.reparam_sample(mean, std, noise)))

    assert grad_check(fn, Tensor(RngState(10).normal((3, 4)))) < 1e-4


def test_take_rows_gradients_accumulate():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = T.tsum(T.take_rows(table, np.array([0, 0, 2])))
    out.backward()
    assert np.allclose(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_determinism_bit_identical():
    def run():
        rng = RngState(42)
        x = Tensor(rng.child(0).normal((4, 4)), requires_grad=True)
        w = Tensor(rng.child(1).normal((4, 4)), requires_grad=True)
        noise = rng.child(2).normal((4, 4))
        out = T.tsum(T.square(T.reparam_sample(T.matmul(x, w),
                                               T.softplus(w), noise)))
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_evaluate_returns_tensor():
    out = T.evaluate(lambda a, b: T.add(a, b), Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert isinstance(out, Tensor)
    assert np.array_equal(out.data, np.full(2, 2.0))
