"""Seeded xoshiro256** generator with labelled substreams.

All stochastic choices in the package (parameter init, shuffling, data
generation, hyperparameter sampling) draw from a :class:`Rng`, never from
numpy's or Python's global state.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 step; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def _label_key(label):
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class Rng:
    """xoshiro256** stream whose 256-bit state is filled by splitmix64(seed)."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            out, sm = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state):
        rng = cls.__new__(cls)
        rng.seed = None
        rng._s = [int(v) & MASK64 for v in state]
        if not any(rng._s):
            raise ValueError("xoshiro256** state must not be all zero")
        return rng

    @property
    def state(self):
        return tuple(self._s)

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def substream(self, label):
        """Independent generator derived from this stream's seed and a fixed label.

        Derivation depends only on (seed, label), not on how many draws were
        already taken, so substreams are stable across code paths.
        """
        if self.seed is None:
            raise ValueError("substreams need a seeded generator")
        mixed, _ = splitmix64(self.seed ^ _label_key(label))
        return Rng(mixed)

    def random(self):
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low, high):
        return low + (high - low) * self.random()

    def log_uniform(self, low, high):
        return math.exp(self.uniform(math.log(low), math.log(high)))

    def integers(self, n):
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def normal(self):
        # Box-Muller, one value per call; the partner value is discarded so
        # every draw consumes exactly two u64s.
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, n):
        """``n`` uniforms as a float64 numpy array."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.random()
        return out

    def normal_array(self, n):
        """``n`` standard normals (Box-Muller, both values of each pair used)."""
        m = (n + 1) // 2
        u = self.uniform_array(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def shuffle(self, items):
        """Fisher-Yates shuffle, returning a new list."""
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def rng(seed):
    return Rng(seed)
