"""Thread-count resolution and order-preserving parallel execution.

Work is always split into the same fixed chunks and results are merged
in chunk order, so outputs are bitwise identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

ENV_THREADS = "HYPERFLOW_THREADS"

_T = TypeVar("_T")
_R = TypeVar("_R")


def resolve_threads(explicit: int | None = None) -> int:
    """Worker count: explicit argument, else HYPERFLOW_THREADS, else cpu count."""
    if explicit is not None:
        n = int(explicit)
        if n < 1:
            raise ValueError(f"threads must be >= 1, got {explicit}")
        return n
    env = os.environ.get(ENV_THREADS)
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_THREADS} must be >= 1, got {env!r}")
        return n
    return max(1, os.cpu_count() or 1)


def ordered_map(fn: Callable[[_T], _R], items: Sequence[_T], threads: int) -> list[_R]:
    """Apply fn to every item, returning results in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
