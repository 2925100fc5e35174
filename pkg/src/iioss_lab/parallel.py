"""Chunked, order-preserving execution of sample loops."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

CHUNK = 512


def default_jobs() -> int:
    env = os.environ.get("IIOSS_LAB_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_chunks(fn: Callable[[np.ndarray], object], total: int, jobs: int = 1, chunk: int = CHUNK) -> list:
    """Apply ``fn`` to consecutive index blocks of ``range(total)``.

    Results come back in block order, so merged outcomes do not depend on ``jobs``.
    """
    blocks = [np.arange(i, min(i + chunk, total)) for i in range(0, total, chunk)]
    if jobs <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, blocks))
