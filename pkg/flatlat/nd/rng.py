"""Counter-based deterministic random streams.

Uniforms come from numpy's Philox bit generator keyed by the stream seed;
normals are produced by Box-Muller from those uniforms, so a (seed, counter)
pair maps to the same numbers on every platform.
"""

from __future__ import annotations

import zlib
from typing import Optional, Sequence

import numpy as np

from flatlat.errors import ContractError

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    """Seed of the sub-stream named `label` under `seed`."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(zlib.crc32(label.encode("utf-8")),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    """A labeled, reproducible stream of random numbers."""

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0:
            raise ContractError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed, counter=int(counter))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        words = self._bitgen.state["state"]["counter"]
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    def child(self, label: str) -> "RngStream":
        return RngStream(derive_seed(self.seed, label))

    def uniform(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape: Sequence[int] | int = (), dtype=np.float64) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape: Sequence[int] | int = ()) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"bernoulli probability must be in [0, 1], got {p}")
        return self._gen.random(shape) < p
