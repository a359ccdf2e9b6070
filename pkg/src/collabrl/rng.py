"""Splittable, counter-based random streams.

Every random draw in the package comes from a stream keyed by a tuple such as
``(seed, "tabular", "mask")``.  Streams with different keys are statistically
independent and a stream is fully determined by its key, so serial and
parallel executions of the same experiment draw identical numbers.
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
    """Return the Philox generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=_word(seed), spawn_key=tuple(_word(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
