#!/usr/bin/env python3
"""
Parallel Processor for vctest.
Runs independent replicates (bootstrap draws, simulation replicates) concurrently.

Replicates are CPU-bound Python optimiser loops, so the default backend runs
them in worker processes through joblib's loky executor; the thread backend
remains for callers whose tasks release the GIL or cannot be pickled.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

from joblib import Parallel, delayed

from core.config_manager import get_config

logger = logging.getLogger(__name__)

BACKENDS = ("processes", "threads")


@dataclass(frozen=True)
class TaskFailure:
    """Placeholder result for a task that raised."""

    index: int
    error: BaseException

    def __bool__(self) -> bool:
        return False


def _guarded(func: Callable[[Any], Any], index: int, item: Any) -> Any:
    try:
        return func(item)
    except Exception as e:
        return TaskFailure(index, e)


class ParallelProcessor:
    """
    Ordered map over a process or thread pool.

    Results come back in input order whatever the scheduling, so any seeded
    per-task stream gives the same output for every worker count and backend.
    """

    def __init__(self, max_workers: Optional[int] = None, backend: Optional[str] = None):
        parallel_config = get_config().get("performance.parallel", {}) or {}
        self.enabled = parallel_config.get("enabled", True)
        if max_workers is None:
            max_workers = parallel_config.get("max_workers", 1)
        self.max_workers = int(max_workers)
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")
        self.backend = backend or parallel_config.get("backend", "processes")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        self.batch_size = parallel_config.get("batch_size", "auto")

        self.stats: Dict[str, Any] = {}
        self.reset_stats()

    def _results(self, func: Callable[[Any], Any], items: List[Any], workers: int) -> Iterable[Any]:
        if workers == 1 or len(items) <= 1:
            return (_guarded(func, i, item) for i, item in enumerate(items))
        if self.backend == "threads":
            pool = ThreadPoolExecutor(max_workers=workers)
            futures = [pool.submit(_guarded, func, i, item) for i, item in enumerate(items)]
            pool.shutdown(wait=False)
            return (future.result() for future in futures)
        return Parallel(n_jobs=workers, backend="loky", batch_size=self.batch_size, return_as="generator")(
            delayed(_guarded)(func, i, item) for i, item in enumerate(items)
        )

    def map(
        self,
        func: Callable[[Any], Any],
        items: Sequence[Any],
        on_done: Optional[Callable[[int, bool], None]] = None,
    ) -> List[Any]:
        """
        Apply ``func`` to every item.

        Args:
            func: Task function; exceptions become TaskFailure entries. The
                process backend pickles it with cloudpickle, so closures work
                but patches applied in the parent after import do not reach
                the workers.
            items: Task inputs
            on_done: Optional callback(index, success), run in the calling
                process as results arrive in input order

        Returns:
            Results in input order
        """
        items = list(items)
        self.stats = {
            "total_tasks": len(items),
            "completed_tasks": 0,
            "failed_tasks": 0,
            "start_time": time.time(),
            "end_time": None,
        }
        workers = self.max_workers if self.enabled else 1
        results: List[Any] = []
        for index, result in enumerate(self._results(func, items, workers)):
            ok = not isinstance(result, TaskFailure)
            if ok:
                self.stats["completed_tasks"] += 1
            else:
                self.stats["failed_tasks"] += 1
                logger.debug("task %d failed: %s", index, result.error)
            if on_done is not None:
                on_done(index, ok)
            results.append(result)
        self.stats["end_time"] = time.time()
        return results

    def get_stats(self) -> Dict[str, Any]:
        """Counters plus total and per-task wall time of the last map."""
        stats = dict(self.stats)
        start = stats["start_time"]
        stats["total_time"] = (stats["end_time"] or time.time()) - start if start else 0.0
        done = stats["completed_tasks"]
        stats["avg_time_per_task"] = stats["total_time"] / done if done else 0.0
        return stats

    def reset_stats(self) -> None:
        """Reset processing statistics."""
        self.stats = {
            "total_tasks": 0,
            "completed_tasks": 0,
            "failed_tasks": 0,
            "start_time": None,
            "end_time": None,
        }
