"""Deterministic 64-bit SplitMix-style pseudorandom streams.

Every random draw in the package (synthetic weights, calibration sampling,
probe-set generation) goes through this generator so that results are
bit-reproducible across runs and reimplementable in other languages from
the constants below alone.

The stream is counter-based: output i is ``mix64(seed + (i + 1) * GOLDEN)``,
which matches the classic sequential SplitMix64 recurrence.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def mix64(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


class SplitMix64:
    """Sequential SplitMix64 stream over a 64-bit seed."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return mix64(self._state)

    def next_below(self, bound: int) -> int:
        """Uniform-ish integer in [0, bound) via modulo reduction.

        The modulo bias is negligible for the desk-scale bounds used here and
        keeps the algorithm trivially portable.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next_u64() % bound

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 bits of mantissa."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, shape, low: float, high: float) -> np.ndarray:
        """float32 array of uniforms in [low, high), consumed off this stream."""
        n = int(np.prod(shape)) if shape else 1
        words = np.empty(n, dtype=np.uint64)
        for i in range(n):
            words[i] = self.next_u64()
        unit = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + unit * (high - low)
        return out.astype(np.float32).reshape(shape)

    def shuffle_prefix(self, n_total: int, n_take: int) -> list[int]:
        """First ``n_take`` indices of a Fisher-Yates shuffle of range(n_total)."""
        idx = list(range(n_total))
        for i in range(n_take):
            j = i + self.next_below(n_total - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:n_take]


def derive_seed(seed: int, *tags: int) -> int:
    """Independent child seed from a parent seed and integer tags."""
    x = seed & _MASK64
    for tag in tags:
        x = mix64((x + _GOLDEN + (tag & _MASK64)) & _MASK64)
    return x
