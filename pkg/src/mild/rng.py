"""Counter-based random streams.

Every draw is a pure function of ``(key, counter)``: the SplitMix64 output
function applied to ``key + (counter + 1) * GAMMA``.  Keys are derived from a
seed plus arbitrary tags (purpose, time index, ...) by hashing, so streams can
be split without coordination and per-pixel draws do not depend on the order
in which pixels are visited.
"""
from __future__ import annotations

import hashlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_key(seed: int, *tags) -> int:
    """64-bit stream key for ``seed`` and a tag path such as ``("noise", 3)``."""
    text = "/".join([str(int(seed)), *map(str, tags)]).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def bits(key: int, counters) -> np.ndarray:
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(key) + (c + np.uint64(1)) * _GAMMA)


class Stream:
    """Random stream addressed by counter.

    ``uniform(shape)`` maps element ``i`` of the C-ordered output to counter
    ``offset + i``; a (N, k) request therefore keys row ``n`` draw ``j`` by the
    counter ``n * k + j``.
    """

    def __init__(self, seed: int, *tags):
        self.key = derive_key(seed, *tags)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, offset: int = 0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        b = bits(self.key, np.arange(offset, offset + n, dtype=np.uint64))
        u = (b >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, offset: int = 0) -> np.ndarray:
        """Standard normals by Box-Muller; consumes two counters per value."""
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((n, 2), offset=2 * offset)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (r * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)

    def integers(self, low: int, high: int, shape, offset: int = 0) -> np.ndarray:
        """Integers in ``[low, high)``."""
        u = self.uniform(shape, offset=offset)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
