"""Keyed random streams.

Every random draw in a simulation comes from a generator derived from the
experiment seed plus a tuple of integer keys, so results never depend on
call order, worker count or which clients happen to be idle.
"""

from __future__ import annotations

import numpy as np

# domain tags keep streams for different purposes disjoint
POPULATION = 1
BATCH = 2
TEST_SET = 3
INIT = 4
GROUPING = 5
SELECTION = 6
TRAINING = 7
FEDAVG_SAMPLE = 8
CSV_SPLIT = 9
JITTER = 10


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Return a generator that is a pure function of ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *keys: int) -> int:
    """Derive a plain integer seed, for APIs that take an int rather than a generator."""
    return int(stream(seed, *keys).integers(0, 2**31 - 1))
