"""Bounded worker pool for independent, index-addressed work units.

Results are collected by index, so thread count never changes any output;
a cap of 1 (the default) runs serially with zero overhead.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

_MAX_THREADS = 1

T = TypeVar("T")


def set_max_threads(n: int) -> None:
    global _MAX_THREADS
    _MAX_THREADS = max(1, int(n))


def get_max_threads() -> int:
    return _MAX_THREADS


def run_indexed(fn: Callable[[int], T], count: int) -> list[T]:
    """fn(i) for i in range(count), results ordered by i."""
    if count <= 0:
        return []
    if _MAX_THREADS == 1 or count == 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=min(_MAX_THREADS, count)) as pool:
        return list(pool.map(fn, range(count)))
