"""Small fully-connected networks and Gaussian/Bernoulli loss helpers."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import RngState
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class MLP:
    """Dense stack with tanh hidden activations and a linear head.

    Parameters are named "<prefix>/w{k}" and "<prefix>/b{k}" so they can be
    collected into flat checkpoint dicts.
    """

    def __init__(self, prefix: str, sizes: list[int], rng: RngState):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = list(sizes)
        self.params: dict[str, Tensor] = {}
        for k in range(len(sizes) - 1):
            fan_in = sizes[k]
            w = rng.child(k, 0).normal((fan_in, sizes[k + 1])) / math.sqrt(fan_in)
            b = np.zeros(sizes[k + 1])
            self.params[f"{prefix}/w{k}"] = Tensor(w, requires_grad=True)
            self.params[f"{prefix}/b{k}"] = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        """Forward pass; with frozen=True the weights enter the graph as
        constants so no gradient can reach them."""
        h = x
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            w = self.params[f"{self.prefix}/w{k}"]
            b = self.params[f"{self.prefix}/b{k}"]
            if frozen:
                w, b = w.detach(), b.detach()
            h = T.add(T.matmul(h, w), b)
            if k < n_layers - 1:
                h = T.tanh(h)
        return h

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


def softplus_std(raw: Tensor, floor: float) -> Tensor:
    """Positive scale via softplus plus a hard floor."""
    return T.add(T.softplus(raw), T.constant(floor))


def gaussian_nll(target: np.ndarray, mean: Tensor, std: Tensor) -> Tensor:
    """Negative log density of target under N(mean, std^2), summed over the
    trailing feature axis and averaged over the leading batch axis."""
    tt = T.constant(target)
    inv = T.exp(-T.log(std))
    z = T.mul(T.sub(tt, mean), inv)
    per_elem = T.add(T.mul(T.constant(0.5), T.square(z)),
                     T.add(T.log(std), T.constant(0.5 * LOG_2PI)))
    batch = target.shape[0] if target.ndim > 1 else 1
    return T.mul(T.tsum(per_elem), T.constant(1.0 / batch))


def gaussian_kl(q_mean: Tensor, q_std: Tensor, p_mean: Tensor, p_std: Tensor) -> Tensor:
    """KL(N(q) || N(p)) for diagonal Gaussians, summed over features and
    averaged over the batch."""
    log_ratio = T.sub(T.log(p_std), T.log(q_std))
    inv_p_var = T.exp(T.mul(T.constant(-2.0), T.log(p_std)))
    num = T.add(T.square(q_std), T.square(T.sub(q_mean, p_mean)))
    per_elem = T.add(log_ratio,
                     T.sub(T.mul(T.constant(0.5), T.mul(num, inv_p_var)), T.constant(0.5)))
    total = T.tsum(per_elem)
    batch = q_mean.shape[0] if len(q_mean.shape) > 1 else 1
    return T.mul(total, T.constant(1.0 / batch))


def bernoulli_logit_nll(target: np.ndarray, logit: Tensor) -> Tensor:
    """Mean over batch of -log Bernoulli(target | sigmoid(logit))."""
    tt = T.constant(target)
    # -[t*logit - softplus(logit)] == softplus(logit) - t*logit
    per = T.sub(T.softplus(logit), T.mul(tt, logit))
    batch = target.shape[0] if target.ndim > 0 else 1
    return T.mul(T.tsum(per), T.constant(1.0 / max(1, batch)))
