"""Deterministic 64-bit seed derivation.

mix64 is a splitmix64-style avalanche mix; for a fixed first argument it is
a bijection of the second, so derived seeds never collide across indices.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(z):
    z = (z + _GOLDEN) & _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def mix64(seed, index):
    return splitmix64((seed & _MASK) ^ splitmix64(index & _MASK))


def rng_from(seed, *indices):
    """A PCG64 generator seeded by chaining mix64 over the indices."""
    z = seed & _MASK
    for ix in indices:
        z = mix64(z, ix)
    return np.random.default_rng(np.random.PCG64(z))
