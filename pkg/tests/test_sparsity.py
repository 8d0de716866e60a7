"""Gated masks: formula fidelity, ratios, adaptive penalty, schedule."""

import numpy as np
import pytest

from compwm import tensor as T
from compwm.rng import RngState
from compwm.sparsity import (GatedMask, SparsityConfig, adaptive_l1,
                             apply_gated_mask, sparsity_ratio, threshold_at)
from compwm.tensor import ShapeMismatchError, Tensor


def scalar_reference(x, b_gate, r_mag, b_mag):
    """Literal per-element transcription of the gating formula."""
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        k = idx[-1]
        gate = 1.0 if abs(x[idx]) + b_gate[k] > 0 else 0.0
        out[idx] = gate * (np.exp(r_mag[k]) * x[idx] + b_mag[k])
    return out


def make_mask(width=6, b_gate=0.5, seed=0):
    mask = GatedMask("obs", width)
    rng = RngState(seed)
    mask.b_gate.data = rng.child(0).normal((width,)) * 0.3 + b_gate
    mask.r_mag.data = rng.child(1).normal((width,)) * 0.2
    mask.b_mag.data = rng.child(2).normal((width,)) * 0.2
    return mask


def test_formula_fidelity_10k_random_cases():
    rng = RngState(99)
    total = 0
    for case in range(40):
        mask = make_mask(width=5, b_gate=float(rng.child(case, 0).normal(())),
                         seed=case)
        x = rng.child(case, 1).normal((50, 5), scale=2.0)
        got = apply_gated_mask(mask, Tensor(x)).data
        want = scalar_reference(x, mask.b_gate.data, mask.r_mag.data,
                                mask.b_mag.data)
        assert np.array_equal(got, want)
        total += x.size
    assert total >= 10_000


def test_gate_closed_at_zero_bias_zero_input():
    mask = GatedMask("obs", 3, b_gate_init=0.0)
    out = apply_gated_mask(mask, Tensor(np.zeros((2, 3))))
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_open_gate_identity_magnitude():
    mask = GatedMask("obs", 4, b_gate_init=1.0)
    x = RngState(3).normal((10, 4))
    out = apply_gated_mask(mask, Tensor(x))
    assert np.array_equal(out.data, x)


def test_direct_evaluation_example():
    mask = GatedMask("obs", 1, b_gate_init=-0.5)
    closed = apply_gated_mask(mask, Tensor(np.array([[0.3]])))
    assert closed.data[0, 0] == 0.0
    opened = apply_gated_mask(mask, Tensor(np.array([[0.8]])))
    assert abs(opened.data[0, 0] - 0.8) < 1e-12


def test_width_mismatch():
    with pytest.raises(ShapeMismatchError):
        apply_gated_mask(GatedMask("obs", 3), Tensor(np.zeros((2, 4))))


def test_straight_through_gradients():
    """Magnitude branch exact; indicator gets the windowed identity rule."""
    mask = make_mask(width=4, seed=7)
    x = RngState(8).normal((6, 4))
    out = T.tsum(apply_gated_mask(mask, Tensor(x)))
    out.backward()
    pre = np.abs(x) + mask.b_gate.data
    gate = (pre > 0).astype(float)
    window = (np.abs(pre) <= 1.0).astype(float)
    mag = np.exp(mask.r_mag.data) * x + mask.b_mag.data
    assert np.allclose(mask.b_mag.grad, gate.sum(axis=0))
    assert np.allclose(mask.r_mag.grad,
                       (gate * np.exp(mask.r_mag.data) * x).sum(axis=0))
    assert np.allclose(mask.b_gate.grad, (window * mag).sum(axis=0))


def test_sparsity_ratio_extremes():
    always_open = GatedMask("obs", 4, b_gate_init=5.0)
    always_closed = GatedMask("obs", 4, b_gate_init=-50.0)
    probe = RngState(5).normal((200, 4))
    assert sparsity_ratio(always_open, probe) == 0.0
    assert sparsity_ratio(always_closed, probe) == 1.0


def test_sparsity_ratio_median_bias():
    probe = RngState(6).normal((10_000, 1))
    mask = GatedMask("obs", 1, b_gate_init=-float(np.median(np.abs(probe))))
    assert abs(sparsity_ratio(mask, probe) - 0.5) < 0.05


def test_sparsity_ratio_empty_probe():
    with pytest.raises(ValueError):
        sparsity_ratio(GatedMask("obs", 2), np.zeros((0, 2)))


def test_adaptive_l1_threshold_zero_is_free():
    masks = [make_mask(seed=k) for k in range(3)]
    probes = {m.name: RngState(k).normal((64, 6)) for k, m in enumerate(masks)}
    l_spar, _ = adaptive_l1(masks, probes, threshold=0.0)
    assert l_spar.item() == 0.0


def test_adaptive_l1_saturated_mask_contributes_zero():
    mask = GatedMask("obs", 4, b_gate_init=-50.0)  # fully closed
    probes = {"obs": RngState(1).normal((64, 4))}
    l_spar, ratios = adaptive_l1([mask], probes, threshold=0.25)
    assert ratios["obs"] == 1.0
    assert l_spar.item() == 0.0


def test_adaptive_l1_open_mask_value():
    # six dims, unit pre-activations, b_gate 0.5 -> penalty 6 * 1.5
    mask = GatedMask("obs", 6, b_gate_init=0.5)
    probes = {"obs": np.ones((10, 6))}
    l_spar, ratios = adaptive_l1([mask], probes, threshold=0.25)
    assert ratios["obs"] == 0.0
    assert abs(l_spar.item() - 9.0) < 1e-12


def test_no_shrinkage_when_open():
    """Open gates with identity magnitude pass values through bit-exactly."""
    mask = GatedMask("reward", 5, b_gate_init=2.0)
    x = RngState(11).normal((100, 5))
    out = apply_gated_mask(mask, Tensor(x))
    assert np.array_equal(out.data, x)


def test_threshold_schedule():
    cfg = SparsityConfig(target_ratio=0.25, anneal_fraction=0.5)
    assert threshold_at(0, 1000, cfg) == 0.0
    assert abs(threshold_at(500, 1000, cfg) - 0.25) < 1e-12
    assert abs(threshold_at(1000, 1000, cfg) - 0.25) < 1e-12
    adapt_cfg = SparsityConfig(target_ratio=0.35, anneal_fraction=0.5)
    assert abs(threshold_at(800, 800, adapt_cfg) - 0.35) < 1e-12
    values = [threshold_at(s, 1000, cfg) for s in range(0, 1001, 25)]
    assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))


def test_threshold_out_of_range():
    with pytest.raises(ValueError):
        threshold_at(5, 4, SparsityConfig())
