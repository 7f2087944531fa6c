"""Deterministic, portable random streams.

splitmix64 and xoshiro256++ are implemented by their published algorithms
so a stream is reproducible bit-for-bit from (master_seed, purpose, index)
in any language, independent of numpy's generator versioning. Every
episode/worker gets its own substream via `stream()`, which is what makes
serial and parallel runs produce identical results.

Conventions that keep consumption reproducible:
  * one `normal(3)` call per policy step (Box-Muller pairs, odd tail
    discarded), never three `normal(1)` calls;
  * the poisoned/clean draw is the first uniform an adversary stream emits.
"""
from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 counter; returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _mix(x: int) -> int:
    """One splitmix64 output from a raw 64-bit word."""
    return splitmix64(x & _MASK64)[1]


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class Xoshiro256pp:
    """xoshiro256++ with convenience samplers (uniform, Box-Muller normal)."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        state = seed & _MASK64
        words = []
        for _ in range(4):
            state, out = splitmix64(state)
            words.append(out)
        if not any(words):  # all-zero state is the one invalid seed
            words[0] = _GOLDEN
        self._s0, self._s1, self._s2, self._s3 = words

    @classmethod
    def from_state(cls, s0: int, s1: int, s2: int, s3: int) -> "Xoshiro256pp":
        """Resume from a raw 256-bit state (must not be all zero)."""
        if not (s0 | s1 | s2 | s3):
            raise ValueError("all-zero xoshiro256++ state is invalid")
        rng = cls.__new__(cls)
        rng._s0, rng._s1, rng._s2, rng._s3 = (s & _MASK64 for s in (s0, s1, s2, s3))
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller; odd tail value discarded."""
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            # u1 in (0, 1] so log() is finite
            u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            out[i] = r * math.cos(theta)
            if i + 1 < n:
                out[i + 1] = r * math.sin(theta)
            i += 2
        return out

    def state(self) -> tuple[int, int, int, int]:
        return (self._s0, self._s1, self._s2, self._s3)


def stream(master_seed: int, purpose: str, index: int = 0) -> Xoshiro256pp:
    """Derive an independent substream for (purpose, index).

    The derivation is pure integer mixing, so workers can recreate any
    episode's stream from the master seed without sharing state.
    """
    x = (master_seed & _MASK64) ^ fnv1a64(purpose)
    x = _mix(x)
    x = _mix(x ^ (((index + 1) * _GOLDEN) & _MASK64))
    return Xoshiro256pp(x)


def derive_seed(master_seed: int, label: str) -> int:
    """A 64-bit integer seed for a named sub-component (e.g. weight init)."""
    return stream(master_seed, "seed." + label).next_u64()
