"""Deterministic, splittable random number generation.

Every draw is a pure function of ``(seed, position)`` in a SplitMix64
stream, so a sequence can be reproduced exactly on any platform from the
seed alone, and independent sub-streams are cheap to derive with
:meth:`RngState.split` / :meth:`RngState.child`. Nothing in the package
touches ambient randomness.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_SPLIT_SALT = 0xD6E8FEB86659FD93
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: int) -> int:
    """SplitMix64 finalizer on a python integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer; identical output to ``_mix``."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


class RngState:
    """Counter-based generator: state is just a seed and a stream position."""

    __slots__ = ("seed", "position")

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK
        self.position = int(position)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed:#x}, position={self.position})"

    def next_u64(self) -> int:
        """Draw one 64-bit word and advance the stream."""
        self.position += 1
        return _mix((self.seed + _GOLDEN * self.position) & _MASK)

    def u64_array(self, n: int) -> np.ndarray:
        """Draw ``n`` words at once; agrees with ``n`` calls to next_u64."""
        counters = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + np.uint64(_GOLDEN) * counters
        return _mix_array(states)

    def uniform(self, n: int | None = None):
        """Uniform float64 in [0, 1): scalar when n is None, else an array."""
        if n is None:
            return (self.next_u64() >> 11) * _INV_2_53
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int | None = None):
        """Standard normal via Box-Muller; each draw consumes two words."""
        if n is None:
            return float(self.normal(1)[0])
        words = self.u64_array(2 * n)
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, bound: int) -> int:
        """Integer in [0, bound). Modulo bias is negligible for bound << 2^64."""
        if bound <= 0:
            raise ParameterError(f"randint bound must be positive, got {bound}")
        return self.next_u64() % bound

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ParameterError(f"cannot sample {k} items from {n}")
        items = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def split(self) -> "RngState":
        """Derive an independent stream; advances this one by one draw."""
        return RngState(_mix(self.next_u64() ^ _SPLIT_SALT))

    def child(self, tag) -> "RngState":
        """Labeled sub-stream; does not advance this stream."""
        if isinstance(tag, int):
            data = tag.to_bytes(16, "little", signed=True)
        else:
            data = str(tag).encode("utf-8")
        return RngState(_mix(self.seed ^ _fnv1a(data)))
