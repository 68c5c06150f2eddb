"""Counter-based random streams.

Every consumer asks for a named stream derived from the run seed, so results
do not depend on the order in which streams are drawn.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def stream(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def scramble_seed(seed: int, *keys) -> int:
    """Integer seed for APIs that only take ints (e.g. scipy.stats.qmc)."""
    return int(stream(seed, *keys).integers(0, 2**31 - 1))
