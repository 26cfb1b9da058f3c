"""Seeded, splittable random streams.

Every stream is a counter-based Philox generator keyed by a root seed and a
path of integer or string keys, so parallel workers that derive their own
stream from the same root never overlap and never depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
