"""Seeded pseudo-random stream: xoshiro256** seeded through splitmix64.

Bit-exact definition (all arithmetic mod 2**64):

* splitmix64: ``z = (state += 0x9E3779B97F4A7C15)``;
  ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``; return ``z ^ (z >> 31)``.
* the four xoshiro state words are four consecutive splitmix64 outputs.
* xoshiro256**: ``result = rotl(s1 * 5, 7) * 9``; ``t = s1 << 17``;
  ``s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)``.
* ``random()`` is ``(next >> 11) * 2**-53``.

Control-flow randomness (shuffles, augmentation choices, scene layout) is
drawn from this stream directly. Bulk arrays (weight init, noise fields) come
from a numpy ``Generator`` seeded with one draw of the stream.
"""

from __future__ import annotations

from typing import MutableSequence

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Return (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    def __init__(self, seed: int):
        sm = int(seed) & MASK64
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self.s = words

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent stream for (seed, key1, key2, ...), e.g. (seed, epoch, sample)."""
        state = int(seed) & MASK64
        for key in keys:
            state, out = splitmix64(state ^ (int(key) & MASK64))
            state = out
        return cls(state)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: MutableSequence) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self.next_u64())
