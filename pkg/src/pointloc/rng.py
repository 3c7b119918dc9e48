"""Counter-based deterministic random streams.

Every random draw in the toolkit comes from a stateless hash of
(key, counter) pairs, so any consumer can be re-run, re-ordered or
parallelised without changing its stream.  The mixer is splitmix64
(Steele et al.), the constants are fixed here and documented in
formats.md; given equal seeds the same numbers come out on any
platform or in any re-implementation.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(x):
    """splitmix64 finalizer: bijective avalanche mix of a uint64 array."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_key(seed, *tags):
    """Fold a seed and any number of integer/string tags into a stream key.

    Strings are folded bytewise so sub-stream names like "query" never
    collide with plain indices.
    """
    key = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                key = mix64(key ^ _U64(b))
        else:
            key = mix64(key ^ _U64(int(tag) & 0xFFFFFFFFFFFFFFFF))
    return _U64(key)


class Stream:
    """A keyed counter stream of deterministic variates.

    The stream holds only an integer cursor; value `i` of a stream is a pure
    function of (key, i).  `split` derives an independent child stream.
    """

    def __init__(self, seed, *tags):
        self.key = derive_key(seed, *tags)
        self._cursor = 0

    def split(self, *tags) -> "Stream":
        child = Stream.__new__(Stream)
        child.key = derive_key(int(self.key), *tags)
        child._cursor = 0
        return child

    def _raw(self, n):
        counters = np.arange(self._cursor, self._cursor + n, dtype=np.uint64)
        self._cursor += n
        return mix64(counters ^ self.key)

    def uniform(self, n=None, low=0.0, high=1.0):
        """Uniform f64 draws in [low, high) from the top 53 bits."""
        m = 1 if n is None else int(np.prod(n))
        bits = self._raw(m) >> np.uint64(11)
        u = bits.astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        if n is None:
            return float(out[0])
        return out.reshape(n)

    def normal(self, n=None, scale=1.0):
        """Gaussian draws via Box-Muller on consecutive uniform pairs."""
        m = 1 if n is None else int(np.prod(n))
        pairs = (m + 1) // 2
        u1 = np.maximum(self.uniform(pairs), 1e-300)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:m]
        out = scale * z
        if n is None:
            return float(out[0])
        return out.reshape(n)

    def integers(self, upper, n=None):
        """Integers in [0, upper) by 64-bit multiply-shift (tiny, benign bias)."""
        m = 1 if n is None else int(n)
        raw = self._raw(m)
        # multiply-high maps the full 64-bit range onto [0, upper)
        out = ((raw.astype(object) * int(upper)) >> 64)
        out = np.array([int(v) for v in out], dtype=np.int64)
        if n is None:
            return int(out[0])
        return out

    def permutation(self, n):
        """Deterministic permutation of range(n): argsort of hashed indices."""
        keys = mix64(np.arange(n, dtype=np.uint64) ^ self.key ^ _U64(self._cursor))
        self._cursor += 1
        return np.argsort(keys, kind="stable")

    def choice(self, n, k):
        """First k entries of a deterministic permutation (no replacement)."""
        return self.permutation(n)[:k]
