"""Deterministic randomness as immutable (seed, stream) values.

A SeededRng is a value, not a stateful generator: two equal values always
produce identical draw sequences, which is what makes augmentation pairs,
episode sampling, and whole experiment runs replayable bit for bit.
Derived streams are obtained by mixing a key into the stream id, so
parallel or reordered consumers cannot perturb each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; full 64-bit avalanche."""
    x = (x + _GOLDEN) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


@dataclass(frozen=True)
class SeededRng:
    """64-bit seed plus 64-bit stream id naming one reproducible stream."""

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        if not 0 <= self.stream <= _MASK64:
            raise ValueError(f"stream must fit in 64 bits, got {self.stream}")

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator; same (seed, stream) -> same sequence."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.default_rng(ss)

    def child(self, key: int) -> "SeededRng":
        """Independent derived stream for sub-task `key`."""
        mixed = _splitmix64((self.stream ^ _splitmix64(key & _MASK64)) & _MASK64)
        return SeededRng(self.seed, mixed)
