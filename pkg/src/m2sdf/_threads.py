"""Worker-count control for per-item parallel loops.

M2SDF_THREADS caps the pool size; the default is the machine's core
count. Work items are independent and seeded, so results never depend
on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["worker_count", "parallel_map"]

ENV_VAR = "M2SDF_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Map fn over items, preserving order; sequential when 1 worker."""
    items = list(items)
    n = min(worker_count(), len(items)) or 1
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
