"""Named random streams derived from a single seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (seed, name) always matches."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
