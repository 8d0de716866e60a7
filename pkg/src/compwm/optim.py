"""Adaptive-moment gradient descent over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeMismatchError, Tensor


class Adam:
    """Adam with bias correction over a dict of name -> Tensor parameters.

    A parameter whose grad is None is treated as having a zero gradient:
    its moments decay but its value is unchanged.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"{name}: grad shape {g.shape} vs param shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"{name}: non-finite gradient")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Moment arrays plus the step counter, for checkpointing."""
        out = {f"{prefix}/step": np.array([float(self.t)])}
        for name in self.params:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}/step"][0])
        for name in self.params:
            self.m[name] = arrays[f"{prefix}/m/{name}"].copy()
            self.v[name] = arrays[f"{prefix}/v/{name}"].copy()


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
