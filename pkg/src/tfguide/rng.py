"""Counter-based random substreams.

Every random draw in the package comes from a Philox generator keyed by a
tuple ``(seed, *keys)``. Keys may be ints or strings (strings are hashed with
CRC32), so adding a new purpose tag or a new run never shifts the numbers that
another cell of an experiment sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


def stream(seed: int, *keys) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``."""
    words = [_word(seed)] + [_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
