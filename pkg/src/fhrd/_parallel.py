"""Order-preserving map over fixed work chunks.

Work is always cut into the same chunks whatever the worker count, and
results come back in chunk order, so downstream reductions see identical
arrays for 1 or N workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence


def chunk_ranges(total: int, size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + size, total)) for lo in range(0, total, size)]


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return max(1, os.cpu_count() or 1)
    return int(workers)


def ordered_map(fn: Callable, tasks: Sequence, workers: int | None = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally in worker processes."""
    n = resolve_workers(workers)
    if n == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def flatten(parts: Iterable[list]) -> list:
    out: list = []
    for p in parts:
        out.extend(p)
    return out
