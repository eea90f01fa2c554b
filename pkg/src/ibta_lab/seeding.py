"""Deterministic, collision-free RNG streams from integer key paths."""

from __future__ import annotations

import numpy as np

# Stream tags; keeping them distinct means e.g. displacement sampling never
# shifts the draws used by input-diversity transforms.
ETA = 0
DIM = 1
TARGETS = 2
INIT = 3
BATCH = 4
EVAL = 5
DATA = 6
TRAIN = 7
FOLDS = 8


def seeded_rng(*keys: int) -> np.random.Generator:
    """Generator keyed by a path of integers (u64 seeds welcome)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) % (1 << 64) for k in keys]))
