"""Reproducible random streams.

Every random quantity in the package is drawn from the raw 64-bit output of
numpy's Philox-4x64-10 counter-based generator.  Only the raw bit stream is
used (never ``Generator`` distribution methods, whose algorithms numpy may
change between releases), and transformations to uniforms, normals and
signs are done here, so a seed maps to the same numbers on every platform.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "philox4x64-10/raw-u64/box-muller"

_U53 = 2.0**-53


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 64-bit seed (SeedSequence hashing)."""
    ss = np.random.SeedSequence([int(k) & 0xFFFF_FFFF_FFFF_FFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Stream:
    """Sequential draws from one Philox key."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._bits = np.random.Philox(key=self.seed, counter=0)

    def raw(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by the Box-Muller transform."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = radius * np.cos(theta)
        out[:, 1] = radius * np.sin(theta)
        return out.ravel()[:n]

    def signs(self, n: int) -> np.ndarray:
        """+1/-1 with probability one half each (top bit of each word)."""
        bits = (self.raw(n) >> np.uint64(63)).astype(np.float64)
        return 1.0 - 2.0 * bits

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on 53-bit uniforms."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
