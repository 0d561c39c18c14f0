"""Portable, counter-based random numbers.

Every random draw in the package goes through :class:`SplitMix64` so that
datasets, initial weights and mini-batch indices are reproducible across
platforms and numpy versions, and can be regenerated by another language
from the algorithm alone:

* raw output ``i`` (0-based) of a stream with key ``k`` is
  ``mix64(k + (i + 1) * 0x9E3779B97F4A7C15)`` with the SplitMix64 finalizer
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31`` (all arithmetic mod 2**64);
* the stream key is ``mix64(seed ^ (stream * 0xD1B54A32D192ED03))``;
* uniforms are ``(raw >> 11) * 2**-53`` in ``[0, 1)``;
* normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``;
* integers in ``[0, high)`` are ``floor(uniform * high)``.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM = 0xD1B54A32D192ED03
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


class SplitMix64:
    """Seeded generator; ``stream`` selects an independent sequence."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.seed ^ ((self.stream * _STREAM) & _MASK)) & _MASK
        self._key = np.uint64(int(mix64(np.array([key], dtype=np.uint64))[0]))
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return mix64(self._key + idx * _GOLDEN)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, high: int, n: int) -> np.ndarray:
        if high < 1:
            raise ValueError(f"integers() needs high >= 1, got {high}")
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniforms; stable sort keeps ties deterministic
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, stream: int) -> "SplitMix64":
        return SplitMix64(self.seed, stream)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "SplitMix64":
        g = cls(state["seed"], state["stream"])
        g.counter = int(state["counter"])
        return g
