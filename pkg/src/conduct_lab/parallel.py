"""Thread-count resolution and an order-preserving parallel map."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "CONDUCT_LAB_THREADS"


def thread_count(threads: int | None = None) -> int:
    """Explicit value, else ``$CONDUCT_LAB_THREADS``, else the CPU count."""
    if threads is None:
        raw = os.environ.get(ENV_VAR)
        threads = int(raw) if raw else (os.cpu_count() or 1)
    return max(1, int(threads))


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly on a thread pool; output order is input order."""
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
