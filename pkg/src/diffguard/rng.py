"""Deterministic random number generation.

Every stochastic component in this package draws from an `Rng` keyed by
(seed, stream).  The generator is counter-based (Philox), so a given key
always reproduces the same sequence regardless of platform or of what other
generators were used before it.  Normal variates are produced by an explicit
Box-Muller transform on top of the uniform stream rather than by the
generator's own normal method, which keeps the bit pattern of sampled noise
independent of numpy's internal ziggurat tables.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng"]


class Rng:
    """Counter-based random source for one (seed, stream) pair.

    Distinct stream ids on the same seed give statistically independent
    sequences, which lets training, attack, and evaluation code own separate
    streams without coordinating draw counts.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative integers")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, offset: int) -> "Rng":
        """Return an independent Rng on the same seed at stream + offset."""
        return Rng(self.seed, self.stream + int(offset))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on [0, 1) with the requested shape, float64."""
        return self._gen.random(size=shape, dtype=np.float64)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        shape = tuple(np.atleast_1d(np.asarray(shape, dtype=int))) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # 1 - U keeps u1 in (0, 1] so the log below is finite.
        u1 = 1.0 - self._gen.random(size=pairs, dtype=np.float64)
        u2 = self._gen.random(size=pairs, dtype=np.float64)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        out = z[:n]
        if shape == ():
            return np.float64(out[0])
        return out.reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        """A uniformly random permutation of range(n)."""
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        """Sample `size` indices from range(n)."""
        return self._gen.choice(n, size=size, replace=replace)
