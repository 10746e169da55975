"""Per-task random streams derived from a (seed, task id) pair."""

from __future__ import annotations

import numpy as np


def task_rng(seed: int, *task: int) -> np.random.Generator:
    """Independent generator for a task, regardless of scheduling order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(t) for t in task)))


def task_seed64(seed: int, *task: int) -> int:
    """A 64-bit integer seed for the compiled walkers."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(t) for t in task))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
