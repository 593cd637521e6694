"""Reproducible per-trajectory random streams.

Every trajectory owns an independent Philox stream. Trajectory ``n`` of an
ensemble with master seed ``m`` uses the 64-bit seed ``split(m, n)``, derived
through ``numpy.random.SeedSequence(m, spawn_key=(n,))``. The derivation depends
only on ``(m, n)``, so results do not depend on how trajectories are scheduled.
Each step of a trajectory consumes exactly one ``Generator.random()`` draw.
"""
from __future__ import annotations

import numpy as np

GENERATOR = "numpy.random.Philox"
MASK64 = (1 << 64) - 1


def split(master_seed: int, n: int) -> int:
    """64-bit seed for trajectory ``n`` of the ensemble seeded by ``master_seed``."""
    if n < 0:
        raise ValueError("trajectory index must be non-negative")
    ss = np.random.SeedSequence(int(master_seed) & MASK64, spawn_key=(int(n),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int) -> np.random.Generator:
    """The random stream a trajectory with this seed draws its uniforms from."""
    return np.random.Generator(np.random.Philox(int(seed) & MASK64))


def uniforms(streams, count: int) -> np.ndarray:
    """Next ``count`` uniforms of each stream, shape ``(count, len(streams))``."""
    out = np.empty((count, len(streams)))
    for j, g in enumerate(streams):
        out[:, j] = g.random(count)
    return out
