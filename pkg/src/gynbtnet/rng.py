"""Counter-based random streams: splitmix64 seeding a xoshiro256** generator.

Every consumer (phantom cases, patch masks, augmentation draws) derives its
own stream from ``(seed, key...)`` so results never depend on call order or
on how work is split across threads.
"""

import math

import numpy as np

from .kernels import _backend

MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 step. Returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed, *keys):
    """Fold integer keys into a seed; distinct key tuples give distinct streams."""
    acc = int(seed) & MASK64
    for key in keys:
        _, acc = splitmix64(acc ^ (int(key) & MASK64))
    return acc


class Xoshiro256:
    """xoshiro256** with a splitmix64-expanded 64-bit seed."""

    def __init__(self, seed):
        s = int(seed) & MASK64
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    @classmethod
    def for_stream(cls, seed, index):
        return cls(splitmix64((int(seed) ^ int(index)) & MASK64)[1])

    def next_u64(self, n):
        return _backend.xoshiro_fill(self.state, int(n))

    def random(self, n=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        m = 1 if n is None else n
        u = (self.next_u64(m) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if n is None else u

    def below(self, n):
        """Unbiased integer in [0, n) by rejection."""
        n = int(n)
        if n <= 0:
            raise ValueError("upper bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = int(self.next_u64(1)[0])
            if v < limit:
                return v % n

    def uniform(self, low, high, n=None):
        u = self.random(n)
        return low + (high - low) * u

    def normal(self, n):
        """Standard normals by the Box-Muller transform."""
        m = (n + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * math.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
