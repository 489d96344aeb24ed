import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFF


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; string keys name a stream."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))
