"""Counter-based pseudorandom streams.

Every stream is a pure value (seed, stream counter) feeding a Philox
generator, so identical states reproduce identical draws on any platform
and independent streams can be derived without shared mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


@dataclass(frozen=True)
class RngState:
    """Immutable handle on one pseudorandom stream."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)

    def child(self, *tags: int) -> "RngState":
        """Derive an independent sub-stream from integer tags."""
        s = self.stream
        for t in tags:
            s = _splitmix64(s ^ _splitmix64(int(t) & _MASK64))
        return RngState(self.seed, s)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return scale * self.generator().standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def one_hot(self, cardinality: int, shape) -> np.ndarray:
        """Uniform one-hot rows, shape (*shape, cardinality)."""
        idx = self.generator().integers(0, cardinality, size=shape)
        out = np.zeros(tuple(np.atleast_1d(shape)) + (cardinality,), dtype=np.float64)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
