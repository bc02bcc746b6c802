"""Deterministic random streams.

Every source of randomness in a run is a named stream keyed by
(seed, stream name). Streams are counter-based (Philox), so the same
seed and the same call sequence reproduce the same values on every
platform, independent of how many other streams were consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngState:
    """A named Philox stream derived from a 64-bit seed."""

    def __init__(self, seed: int, stream: str = "main"):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, _stream_key(stream)]))

    def normal(self, shape, dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low, high, shape, dtype=np.float32):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def unit_vector(self, n: int, dtype=np.float32) -> np.ndarray:
        """Gaussian draw normalized to unit L2 norm (redrawn if degenerate)."""
        while True:
            v = self.normal((n,), dtype=np.float64)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return (v / norm).astype(dtype)

    def spawn(self, substream: str) -> "RngState":
        """Derive an independent stream under the same seed."""
        return RngState(self.seed, f"{self.stream}/{substream}")

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream={self.stream!r})"
