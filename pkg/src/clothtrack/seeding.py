"""Counter-based seed fan-out: every consumer gets its own named stream."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for the stream ``names`` under a root ``seed``."""
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        keys.append(zlib.crc32(str(name).encode()) if not isinstance(name, int) else int(name))
    ss = np.random.SeedSequence(keys)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
