"""Replayable random streams.

Every replica draws from its own generator derived from (master seed,
purpose, replica index), so results do not depend on execution order or the
number of worker threads.  Pairwise edge uniforms come from a keyed hash of
the two point identities instead of a sequential stream.
"""
from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

PURPOSES = {"points": 1, "edges": 2, "thinning": 3, "marks": 4, "mecke": 5, "second": 6}


def mix64(z):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def to_unit(z) -> np.ndarray:
    """Map uint64 hashes to floats in [0, 1) using the top 53 bits."""
    return (np.asarray(z, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


class StreamFactory:
    """Derives per-replica generators and hash keys from one master seed."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed)

    def generator(self, replica: int, purpose: str = "points") -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(PURPOSES[purpose], int(replica)))
        return np.random.Generator(np.random.PCG64(ss))

    def key(self, replica: int, purpose: str = "edges") -> np.uint64:
        z = mix64(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF))
        z = mix64(z ^ np.uint64(PURPOSES[purpose]))
        return mix64(z ^ np.uint64(int(replica)))

    def pair_uniforms(self, key, ids_i, ids_j) -> np.ndarray:
        return pair_uniforms(key, ids_i, ids_j)


def pair_uniforms(key, ids_i, ids_j) -> np.ndarray:
    """Symmetric uniforms U(i, j) = U(j, i) determined by the key and the two ids."""
    a = np.asarray(ids_i, dtype=np.uint64)
    b = np.asarray(ids_j, dtype=np.uint64)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    z = mix64(np.asarray(key, dtype=np.uint64) ^ lo)
    with np.errstate(over="ignore"):
        z = mix64(z ^ (hi * _GOLDEN))
    return to_unit(z)


def point_uniforms(key, ids) -> np.ndarray:
    return to_unit(mix64(np.asarray(key, dtype=np.uint64) ^ mix64(np.asarray(ids, dtype=np.uint64))))
