"""Deterministic counter-based randomness.

One fixed algorithm everywhere (data synthesis, parameter init, training
noise) so a (seed, config, data) triple reproduces a run bit-for-bit:
SplitMix64 indexed by a 64-bit counter, normals via Box-Muller.
"""
from __future__ import annotations

import numpy as np

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 2.0 ** -53


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class CounterRng:
    """SplitMix64 stream keyed by (seed, draw counter).

    Output i of a given seed is a pure function of (seed, i), so any prefix
    of draws is reproducible regardless of how the draws were batched.
    """

    def __init__(self, seed: int):
        self._key = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    @property
    def counter(self) -> int:
        return self._counter

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(self._key + _GAMMA * idx)

    def uniform(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """iid samples in [0, 1), 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """iid standard normals via Box-Muller on uniform pairs.

        Consumes 2*ceil(n/2) raw draws for n samples; z[2i], z[2i+1] are the
        cos/sin halves of pair i.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniform((2 * pairs,))
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))  # log1p keeps u1=0 finite
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        z = z[:n]
        return z.reshape(shape) if shape else z[0]

    def below(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return int(self._raw(1)[0] % _U64(n))

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
