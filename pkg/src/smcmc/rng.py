"""Counter-based RNG stream derivation.

Every random subcomputation in the package pulls from a generator derived
from the master seed plus an integer path (run, time step, EP round, node,
stage).  Any piece of a run can therefore be reproduced in isolation, and
node-level computations stay bit-identical whether they execute serially
or concurrently.
"""

from __future__ import annotations

import numpy as np

# Stage indices used when a filter step spawns its per-stage streams.
STAGE_INIT = 0
STAGE_JOINT = 1
STAGE_REFINE_PREV = 2
STAGE_REFINE_CURRENT = 3


def seed_seq(master_seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by (master_seed, *path)."""
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *path)."""
    return np.random.default_rng(seed_seq(master_seed, *path))


def as_seed_seq(seed) -> np.random.SeedSequence:
    """Coerce an int or SeedSequence into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))
