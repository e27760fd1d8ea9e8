"""Deterministic random streams.

Every stream is a Philox (counter-based) generator keyed by the user seed and
a stream name, so results do not depend on how many draws happened elsewhere.
"""
import zlib

import numpy as np


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return the generator for ``(seed, name, *counters)``."""
    tag = zlib.crc32(name.encode("utf-8"))
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag, *(int(c) for c in counters)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
