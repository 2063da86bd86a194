"""Seeded random streams.

All randomness uses NumPy's ``Philox`` bit generator (Philox4x64-10, a
counter-based generator from Salmon et al., SC'11).  A Philox stream is a pure
function of ``(key, counter)``, so a given seed yields the same bits on every
platform; normals come from NumPy's ziggurat sampler on top of that stream.
"""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int = 42):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def spawn(self, index: int) -> "Rng":
        """Independent child stream, stable under the parent's usage."""
        return Rng(self.seed * 1_000_003 + index)
