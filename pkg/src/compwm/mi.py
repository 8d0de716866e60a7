"""Donsker-Varadhan mutual-information machinery.

For m components there are m "own" statistics networks, one per component,
whose bound I(token_i; block_i, history) the model maximizes, and m(m-1)
"cross" networks whose bound I(token_i; block_j, token_j, history) the model
minimizes. Estimator updates and model updates use separate graphs so each
side only ever receives its own gradients: the estimator pass sees detached
features, the model pass sees frozen network weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nets import MLP
from .rng import RngState
from .tensor import Tensor

EXP_CLAMP = 20.0
MODEL_LOSS_CLAMP = 10.0


class MiError(Exception):
    pass


class ScheduleViolationError(MiError):
    pass


def cosine_anneal(t: float, v_start: float, v_end: float) -> float:
    """Smooth interpolation between two coefficient endpoints over t in [0,1]."""
    if not 0.0 <= t <= 1.0:
        raise MiError(f"anneal progress {t} outside [0, 1]")
    if v_end > v_start:
        return v_start + 0.5 * (v_end - v_start) * (1.0 - math.cos(math.pi * t))
    return v_end + 0.5 * (v_start - v_end) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class MiSchedule:
    """Step thresholds and coefficient ramp for the min-max optimization."""

    optimize_after: int = 0
    maximize_after: int = 200
    minimize_after: int = 200
    anneal_fraction: float = 0.5
    v_start: float = 0.0
    v_end: float = 0.1

    def __post_init__(self):
        if min(self.optimize_after, self.maximize_after, self.minimize_after) < 0:
            raise MiError("schedule thresholds must be non-negative")

    def coefficient(self, step: int, total_steps: int) -> float:
        t = min(1.0, step / max(1, int(self.anneal_fraction * total_steps)))
        return cosine_anneal(t, self.v_start, self.v_end)


def shuffle_marginal(n: int, rng: RngState) -> np.ndarray:
    """Permutation used to break the (token, feature) pairing.

    Draws uniformly over derangements when one exists (n >= 2), else the
    identity. Rejection sampling keeps the distribution uniform.
    """
    if n < 2:
        return np.arange(n)
    gen = rng.generator()
    while True:
        perm = gen.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


class MineEstimator:
    """One statistics network with its bias-correction state."""

    def __init__(self, role: str, i: int, j: int | None, token_dim: int,
                 feature_dim: int, hidden: tuple[int, ...], rng: RngState,
                 ema_decay: float = 0.99):
        if role not in ("own", "cross"):
            raise MiError(f"unknown estimator role {role!r}")
        self.role = role
        self.i = i
        self.j = j
        name = f"mine/own{i}" if role == "own" else f"mine/cross{i}_{j}"
        self.name = name
        self.net = MLP(name, [token_dim + feature_dim] + list(hidden) + [1], rng)
        self.ema_decay = ema_decay
        self.ema_denominator: float | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        return self.net.params

    def dv_estimate(self, token_onehot: np.ndarray, features: Tensor,
                    perm: np.ndarray, frozen: bool,
                    update_ema: bool = True) -> tuple[Tensor, Tensor]:
        """(bound, estimator_loss) on a batch.

        bound = mean T(joint) - log mean exp T(marginal); the marginal pairs
        permuted tokens with the same features. The estimator loss replaces
        the log-term gradient with the moving-average-corrected ratio.
        """
        n = token_onehot.shape[0]
        if n < 2:
            raise MiError(f"need a batch of at least 2, got {n}")
        joint_in = T.concat([T.constant(token_onehot), features])
        marg_in = T.concat([T.constant(token_onehot[perm]), features])
        t_joint = self.net(joint_in, frozen=frozen)
        t_marg = self.net(marg_in, frozen=frozen)
        mean_joint = T.tmean(t_joint)
        exp_marg = T.tmean(T.exp(T.clamp_max(t_marg, EXP_CLAMP)))
        bound = T.sub(mean_joint, T.log(exp_marg))
        if not np.isfinite(bound.data).all():
            raise MiError(f"{self.name}: non-finite bound")
        denom = float(exp_marg.data)
        if update_ema:
            if self.ema_denominator is None:
                self.ema_denominator = denom
            else:
                self.ema_denominator = (self.ema_decay * self.ema_denominator
                                        + (1.0 - self.ema_decay) * denom)
        ema = self.ema_denominator if self.ema_denominator else denom
        est_loss = -(mean_joint - T.mul(exp_marg, T.constant(1.0 / ema)))
        return bound, est_loss


def build_estimators(m: int, values, dims, history_dim: int,
                     hidden: tuple[int, ...], rng: RngState) -> list[MineEstimator]:
    """m own estimators plus m(m-1) cross estimators."""
    ests = []
    for i in range(m):
        feat = dims[i] + history_dim
        ests.append(MineEstimator("own", i, None, values[i], feat, hidden,
                                  rng.child(60, i)))
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            feat = dims[j] + values[j] + history_dim
            ests.append(MineEstimator("cross", i, j, values[i], feat, hidden,
                                      rng.child(61, i, j)))
    return ests


@dataclass
class MiBatch:
    """Per-component samples for one training step.

    blocks[i] carries gradient back into the world model; token_onehots and
    history are plain arrays (history enters stop-gradiented by contract).
    """

    token_onehots: list[np.ndarray]
    blocks: list[Tensor]
    history: np.ndarray


def mi_loss(batch: MiBatch, estimators: list[MineEstimator], schedule: MiSchedule,
            step: int, rng: RngState, enforce_schedule: bool = True,
            train_estimators: bool = True
            ) -> tuple[Tensor, dict[str, Tensor], dict[str, float]]:
    """Model-side loss and estimator losses for one step.

    Returns (l_mi, estimator_losses, bound_values). l_mi is the unscaled
    -(sum own - sum cross); the caller applies the annealed coefficient.
    Terms whose threshold has not been reached contribute zero to l_mi while
    the estimator losses keep training the statistics networks.
    """
    hist = T.constant(batch.history)
    est_losses: dict[str, Tensor] = {}
    bounds: dict[str, float] = {}
    model_terms: list[Tensor] = []
    for est in estimators:
        tok = batch.token_onehots[est.i]
        if est.role == "own":
            feats_model = T.concat([batch.blocks[est.i], hist])
        else:
            feats_model = T.concat([batch.blocks[est.j],
                                    T.constant(batch.token_onehots[est.j]), hist])
        perm = shuffle_marginal(tok.shape[0], rng.child(hash_tag(est.name)))
        # estimator pass: detached features, live network
        if train_estimators and step >= schedule.optimize_after:
            _, est_loss = est.dv_estimate(tok, feats_model.detach(), perm,
                                          frozen=False, update_ema=True)
            est_losses[est.name] = est_loss
        # model pass: live features, frozen network
        gate_step = schedule.maximize_after if est.role == "own" else schedule.minimize_after
        bound, _ = est.dv_estimate(tok, feats_model, perm, frozen=True,
                                   update_ema=False)
        bounds[est.name] = float(bound.data)
        if step >= gate_step:
            if enforce_schedule and step < schedule.optimize_after:
                raise ScheduleViolationError(
                    f"{est.name}: asked for model gradients before optimize_after")
            sign = -1.0 if est.role == "own" else 1.0
            model_terms.append(T.mul(bound, T.constant(sign)))
    if model_terms:
        total = model_terms[0]
        for term in model_terms[1:]:
            total = T.add(total, term)
        l_mi = clamp_abs(total, MODEL_LOSS_CLAMP)
    else:
        l_mi = T.constant(0.0)
    return l_mi, est_losses, bounds


def clamp_abs(x: Tensor, cap: float) -> Tensor:
    """Clamp a scalar to [-cap, cap] with pass-through gradient inside."""
    return T.mul(T.constant(-1.0),
                 T.clamp_max(T.mul(T.constant(-1.0), T.clamp_max(x, cap)), cap))


def hash_tag(name: str) -> int:
    """Stable small integer tag for rng derivation from a name."""
    h = 0
    for ch in name:
        h = (h * 131 + ord(ch)) & 0xFFFFFFFF
    return h
