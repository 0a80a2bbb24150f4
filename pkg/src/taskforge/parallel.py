"""Ordered thread-pool map used for per-tensor and per-chunk work.

Results are always assembled in input order, so the thread count never
changes an output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_threads = 1


def set_threads(n: int | None) -> None:
    global _threads
    _threads = max(1, int(n)) if n else (os.cpu_count() or 1)


def get_threads() -> int:
    return _threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    items = list(items)
    n = threads or _threads
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
