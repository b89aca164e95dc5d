"""Named, reproducible RNG substreams derived from one integer seed."""

import zlib

import numpy as np


def substream(seed, *names):
    """Return a Generator keyed on ``seed`` and a path of names/ints.

    The same (seed, names) pair always yields the same stream, and distinct
    names give statistically independent streams.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            key.append(zlib.crc32(name.encode("utf-8")))
        else:
            key.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
