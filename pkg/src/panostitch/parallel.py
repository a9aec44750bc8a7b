"""Deterministic worker-pool helpers.

The ``PANOSTITCH_THREADS`` environment variable caps the worker count
(0 or unset means auto-detect). Parallel maps always return results in
input order, so using more workers never changes any result.
"""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "PANOSTITCH_THREADS"


def thread_count(config_threads=0):
    """Resolve the effective worker count.

    The environment variable wins over ``config_threads``; 0 means auto.
    """
    raw = os.environ.get(ENV_THREADS, "").strip()
    n = config_threads
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError(f"thread count must be >= 0, got {n}")
    if n == 0:
        n = os.cpu_count() or 1
    return n


def par_map(fn, items, config_threads=0):
    """Map ``fn`` over ``items``, preserving order.

    Tasks must be pure; results are joined in input order so the output is
    identical for any worker count.
    """
    items = list(items)
    workers = min(thread_count(config_threads), max(len(items), 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
