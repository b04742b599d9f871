"""Seeded random streams.

Every random draw in the package comes from numpy's PCG64 bit generator
(O'Neill's permuted congruential generator, 128-bit state, 64-bit output),
so runs with the same seed are bit-reproducible.
"""

import zlib

import numpy as np


def make_rng(seed, *keys):
    """Return a PCG64-backed Generator for ``seed`` and an optional key path.

    Keys (ints or strings) select independent sub-streams, e.g.
    ``make_rng(7, "noise", "N5")``.
    """
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("keys require an integer seed")
        return seed
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
