"""Portable deterministic PRNG: splitmix64 seeding, xoshiro256** streams.

Every stochastic stage of the synthetic generator draws from one
Xoshiro256StarStar stream per sample, so serial and parallel generation
produce identical bytes on any platform.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(root: int, label: str) -> int:
    """Derive a child seed from a root seed and a textual label.

    Mixes an FNV-1a hash of the label into the root via splitmix64, so sub-seeds
    for named pipeline stages are stable across runs and platforms.
    """
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    _, out = splitmix64_next((root ^ h) & _MASK64)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** generator with splitmix64 state expansion.

    ``stream_for(seed, index)`` builds the generator for one sample: the
    root seed drives a single splitmix64 sequence whose 64-bit outputs
    [4*index, 4*index+4) become the xoshiro state.
    """

    def __init__(self, state: tuple[int, int, int, int]):
        if not any(state):
            raise ValueError("xoshiro256** state must not be all-zero")
        self.s = list(state)

    @classmethod
    def from_seed(cls, seed: int) -> "Xoshiro256StarStar":
        return cls.stream_for(seed, 0)

    @classmethod
    def stream_for(cls, seed: int, index: int) -> "Xoshiro256StarStar":
        sm = seed & _MASK64
        out = 0
        for _ in range(4 * index):
            sm, out = splitmix64_next(sm)
        state = []
        for _ in range(4):
            sm, out = splitmix64_next(sm)
            state.append(out)
        return cls(tuple(state))

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (unbiased)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian draw via Box-Muller (one value per pair of uniforms)."""
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
