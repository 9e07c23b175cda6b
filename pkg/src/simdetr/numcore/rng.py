"""Named random streams on top of numpy's counter-based Philox generator."""
from __future__ import annotations

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator keyed by ``(seed, name)``.

    The same pair always yields the same sequence, and distinct names give
    statistically independent streams, so adding a new consumer never shifts
    the draws of an existing one.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = [int(seed) & 0xFFFFFFFF, int(seed) >> 32] + list(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
