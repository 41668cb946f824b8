"""Seeded xoshiro256** generator shared by every randomized routine.

The algorithm is fixed so instances can be regenerated bit-for-bit outside
Python:

* seeding: the 64-bit seed is fed through splitmix64 four times
  (increment ``0x9E3779B97F4A7C15``, multipliers ``0xBF58476D1CE4E5B9`` and
  ``0x94D049BB133111EB``) to fill the 256-bit state;
* ``next_u64``: xoshiro256** (``rotl(s1 * 5, 7) * 9``, shifts 17/45);
* ``random``: ``(next_u64() >> 11) * 2**-53`` in ``[0, 1)``;
* ``integers(lo, hi)``: ``lo + floor(random() * (hi - lo))``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, seed: int) -> None:
        if not -(1 << 63) <= seed < (1 << 64):
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        sm = seed & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform draws in ``[low, high)``, filled in C (row-major) order."""
        if size is None:
            return low + (high - low) * self.random()
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        vals = [low + (high - low) * self.random() for _ in range(count)]
        return np.asarray(vals, dtype=np.float64).reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        span = high - low
        if size is None:
            return low + int(self.random() * span)
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        vals = [low + int(self.random() * span) for _ in range(count)]
        return np.asarray(vals, dtype=np.int64).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items
