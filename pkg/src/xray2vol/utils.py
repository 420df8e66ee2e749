"""Worker-pool helpers honoring the XRAY2VOL_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "XRAY2VOL_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def parallel_map(fn, items):
    """Apply fn over items, threaded when XRAY2VOL_THREADS > 1.

    Results keep item order, so output is identical at any worker count;
    fn must be thread-safe (pure computation plus distinct output files).
    """
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
