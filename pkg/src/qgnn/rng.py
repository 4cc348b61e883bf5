"""xoshiro256++ pseudo-random generator with explicit, immutable state.

The generator never hides state: every draw takes an :class:`RngState` and
returns the advanced one. Bulk draws for stochastic rounding go through a
numba kernel that walks the exact same single stream as the scalar path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

MASK64 = 0xFFFFFFFFFFFFFFFF

JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)
LONG_JUMP = (0x76E15D3EFEFDCBBF, 0xC5004E441C522FB3, 0x77710069854EE241, 0x39109BB02ACBE635)

_TWO_POW_M53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class RngState:
    s0: int
    s1: int
    s2: int
    s3: int

    def __post_init__(self):
        words = (self.s0, self.s1, self.s2, self.s3)
        if any(w < 0 or w > MASK64 for w in words):
            raise ValueError("state words must be 64-bit unsigned integers")
        if not any(words):
            raise ValueError("xoshiro256++ state must not be all zero")

    @property
    def words(self) -> tuple[int, int, int, int]:
        return (self.s0, self.s1, self.s2, self.s3)


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next counter)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), x


def rng_seed(seed: int) -> RngState:
    """Expand a 64-bit seed into a full state with splitmix64."""
    x = int(seed) & MASK64
    words = []
    for _ in range(4):
        w, x = splitmix64(x)
        words.append(w)
    return RngState(*words)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _step(s0: int, s1: int, s2: int, s3: int) -> tuple[int, tuple[int, int, int, int]]:
    result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
    t = (s1 << 17) & MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    return result, (s0, s1, s2, s3)


def rng_next_u64(state: RngState) -> tuple[int, RngState]:
    out, words = _step(*state.words)
    return out, RngState(*words)


def rng_next_unit(state: RngState) -> tuple[float, RngState]:
    """Uniform double in [0, 1) from the top 53 bits of the next output."""
    out, nxt = rng_next_u64(state)
    return (out >> 11) * _TWO_POW_M53, nxt


@njit(cache=True)
def _fill_unit(words, out):
    s0, s1, s2, s3 = words[0], words[1], words[2], words[3]
    for i in range(out.shape[0]):
        r = s0 + s3
        r = ((r << np.uint64(23)) | (r >> np.uint64(41))) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        out[i] = np.float64(r >> np.uint64(11)) * 1.1102230246251565e-16
    words[0] = s0
    words[1] = s1
    words[2] = s2
    words[3] = s3


def uniform_array(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Draw ``n`` uniforms in [0, 1) as float64, consuming ``n`` steps of the stream."""
    words = np.array(state.words, dtype=np.uint64)
    out = np.empty(int(n), dtype=np.float64)
    if n > 0:
        _fill_unit(words, out)
    return out, RngState(*(int(w) for w in words))


def _jump_with(state: RngState, table: tuple[int, ...]) -> RngState:
    acc = [0, 0, 0, 0]
    words = state.words
    for poly in table:
        for b in range(64):
            if poly & (1 << b):
                acc = [a ^ w for a, w in zip(acc, words)]
            _, words = _step(*words)
    return RngState(*acc)


def jump(state: RngState) -> RngState:
    """Advance by 2**128 steps."""
    return _jump_with(state, JUMP)


def long_jump(state: RngState) -> RngState:
    """Advance by 2**192 steps."""
    return _jump_with(state, LONG_JUMP)


def substreams(state: RngState, count: int) -> list[RngState]:
    """Non-overlapping substreams for parallel workers, spaced by long jumps."""
    streams = [state]
    for _ in range(count - 1):
        streams.append(long_jump(streams[-1]))
    return streams
