"""Deterministic stream derivation for parallel Monte Carlo.

Replica i of a given purpose draws from a Philox stream keyed by
(master seed, purpose, i).  Philox is counter based, so any replica's
stream can be rebuilt in O(1) and in isolation; results never depend on
how replicas are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keep streams of unrelated pipelines disjoint even when they
# share a master seed and replica index.
THETA = 1
DRIVER = 2
LATTICE = 3
FK = 4
TRIAL = 5
LOOP = 6
RENDER = 7

_INDEX_BITS = 40


def substream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return the generator for replica `index` of `purpose` under `seed`."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in a u64, got {seed}")
    if not 0 <= int(index) < 2**_INDEX_BITS:
        raise ValueError(f"replica index out of range: {index}")
    key = np.array([seed, (int(purpose) << _INDEX_BITS) | int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
