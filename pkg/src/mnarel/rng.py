"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)`` through
``SeedSequence``, so replication ``r`` of an experiment always sees the same
numbers regardless of how replications are scheduled across workers.
"""
from __future__ import annotations

import os

import numpy as np

WORKERS_ENV = "MNAREL_WORKERS"


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the substream ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))


def worker_count(default: int = 1) -> int:
    """Worker processes for data-parallel loops (``MNAREL_WORKERS`` overrides)."""
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def parallel_map(func, items, workers: int | None = None):
    """``list(map(func, items))``, fanned out over processes when ``workers > 1``."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=max(1, len(items) // (4 * workers))))
