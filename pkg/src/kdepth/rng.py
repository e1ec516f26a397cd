"""Seeded random substreams.

Every random draw in the package comes from a generator built here from a
root seed and a tuple of integer keys (cell index, replicate index, ...).
The same (seed, keys) always yields the same stream, independent of the
order or the process in which streams are created.
"""
from __future__ import annotations

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for the substream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi & 0x7FFFFFFF) << 32 | int(lo)
