"""Gated decoding masks, sparsity measurement, and the adaptive L1 penalty.

A mask gates each latent dimension with a hard indicator on |x| + b_gate and
rescales surviving values with an affine magnitude branch, so selection and
scaling are decoupled: the penalty can close gates without shrinking what
passes through. The indicator is the only non-differentiable operation in
the package; its straight-through rule treats the indicator as the identity
on its pre-activation within |pre| <= 1 and as zero outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mi import cosine_anneal
from .rng import RngState
from .tensor import ShapeMismatchError, Tensor, make_node


@dataclass(frozen=True)
class SparsityConfig:
    target_ratio: float = 0.25
    anneal_fraction: float = 0.5
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie in [0, 1)")


class GatedMask:
    """Per-dimension gate bias plus affine magnitude branch."""

    def __init__(self, name: str, width: int, b_gate_init: float = 0.5):
        self.name = name
        self.width = width
        self.b_gate = Tensor(np.full(width, b_gate_init), requires_grad=True)
        self.r_mag = Tensor(np.zeros(width), requires_grad=True)
        self.b_mag = Tensor(np.zeros(width), requires_grad=True)

    @property
    def params(self) -> dict[str, Tensor]:
        return {
            f"masks/{self.name}/b_gate": self.b_gate,
            f"masks/{self.name}/r_mag": self.r_mag,
            f"masks/{self.name}/b_mag": self.b_mag,
        }

    def gate_open(self, x: np.ndarray) -> np.ndarray:
        """Boolean open/closed per (sample, dim) on plain values."""
        return (np.abs(x) + self.b_gate.data) > 0.0


def apply_gated_mask(mask: GatedMask, x: Tensor) -> Tensor:
    """Forward: 1[|x| + b_gate > 0] * (exp(r_mag) * x + b_mag).

    Backward passes gradients through the magnitude branch exactly and
    through the indicator via the straight-through window on |pre| <= 1.
    """
    if x.shape[-1] != mask.width:
        raise ShapeMismatchError(
            f"mask {mask.name}: width {mask.width} vs input {x.shape}")
    b_gate, r_mag, b_mag = mask.b_gate, mask.r_mag, mask.b_mag
    pre = np.abs(x.data) + b_gate.data
    gate = (pre > 0.0).astype(np.float64)
    mag = np.exp(r_mag.data) * x.data + b_mag.data
    out = gate * mag
    window = (np.abs(pre) <= 1.0).astype(np.float64)

    def back(g):
        g_mag = g * gate
        g_gate = g * mag * window  # d out / d indicator-pre within the window
        gx = g_mag * np.exp(r_mag.data) + g_gate * np.sign(x.data)
        g_bgate = g_gate
        g_rmag = g_mag * np.exp(r_mag.data) * x.data
        g_bmag = g_mag
        reduce = tuple(range(g.ndim - 1))
        return (gx,
                g_bgate.sum(axis=reduce) if reduce else g_bgate,
                g_rmag.sum(axis=reduce) if reduce else g_rmag,
                g_bmag.sum(axis=reduce) if reduce else g_bmag)

    return make_node(out, (x, b_gate, r_mag, b_mag), back, "gated_mask")


def sparsity_ratio(mask: GatedMask, probe: np.ndarray) -> float:
    """Fraction of closed gate evaluations over a probe batch."""
    if probe.size == 0:
        raise ValueError("sparsity_ratio needs a non-empty probe batch")
    return float(1.0 - mask.gate_open(probe).mean())


def adaptive_l1(masks: list[GatedMask], probes: dict[str, np.ndarray],
                threshold: float,
                ratios: dict[str, float] | None = None) -> tuple[Tensor, dict[str, float]]:
    """Penalty sum over masks still below the sparsity threshold.

    Each mask contributes sum(relu(mean|x| + b_gate)) computed from its probe
    batch; once the mask's measured closed ratio reaches the threshold its
    term is exactly zero. Ratios default to measurements on the same probes
    but can be supplied from a separate held-aside batch. Returns
    (l_spar, ratios).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    ratios = dict(ratios) if ratios is not None else {}
    total: Tensor | None = None
    for mask in masks:
        probe = probes[mask.name]
        if mask.name not in ratios:
            ratios[mask.name] = sparsity_ratio(mask, probe)
        if ratios[mask.name] >= threshold:
            continue
        mean_abs = np.abs(probe).mean(axis=0)
        term = T.tsum(T.relu(T.add(T.constant(mean_abs), mask.b_gate)))
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.constant(0.0)
    return total, ratios


def threshold_at(step: int, total_steps: int, config: SparsityConfig) -> float:
    """Sparsity threshold schedule: cosine ramp from zero, then constant."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    ramp = max(1, int(config.anneal_fraction * total_steps))
    t = min(1.0, step / ramp)
    return cosine_anneal(t, 0.0, config.target_ratio)
