"""Portable counter-based PRNG.

The generator is SplitMix64 (64-bit state, golden-ratio increment
0x9E3779B97F4A7C15, finaliser constants 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB).  Output k of a stream seeded with s is
``mix(s + (k + 1) * 0x9E3779B97F4A7C15 mod 2**64)``, so any implementation
with wrapping 64-bit integer arithmetic reproduces the same bits.

* uniform doubles: ``(u64 >> 11) * 2**-53`` in [0, 1)
* normals: Box-Muller on consecutive uniform pairs (u1, u2) using
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* per-scene streams: ``stream_seed(seed, index)`` is the first output of a
  stream seeded with ``seed XOR ((index + 1) * 0xD1B54A32D192ED03)``
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM = 0xD1B54A32D192ED03
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_seed(seed: int, index: int) -> int:
    s = (int(seed) ^ (((int(index) + 1) * _STREAM) & _MASK64)) & _MASK64
    return int(SplitMix64(s).next_u64(1)[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.state) + k * _GAMMA)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def uniform(self, n: int = 1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int = 1) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        span = high - low + 1
        return low + min(int(self.uniform(1)[0] * span), span - 1)
