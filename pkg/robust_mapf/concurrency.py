import logging
import os
from typing import Callable, List, Optional, Sequence, TypeVar

import anyio
import anyio.to_thread

logger = logging.getLogger(__name__)

T = TypeVar("T")


def default_jobs() -> int:
    return os.cpu_count() or 1


async def _gather(funcs: Sequence[Callable[[], T]], jobs: int) -> List[T]:
    limiter = anyio.CapacityLimiter(jobs)
    results: List[Optional[T]] = [None] * len(funcs)

    async def run_one(index: int, func: Callable[[], T]) -> None:
        results[index] = await anyio.to_thread.run_sync(func, limiter=limiter)

    async with anyio.create_task_group() as task_group:
        for index, func in enumerate(funcs):
            task_group.start_soon(run_one, index, func)
    return results  # type: ignore[return-value]


def run_jobs(funcs: Sequence[Callable[[], T]], jobs: Optional[int] = None) -> List[T]:
    """Run independent jobs on at most ``jobs`` worker threads.

    Results come back in submission order whatever the scheduling, so callers
    that merge them stay deterministic.
    """
    jobs = default_jobs() if jobs is None else jobs
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    if jobs == 1 or len(funcs) <= 1:
        return [func() for func in funcs]
    logger.debug("running %d jobs on %d workers", len(funcs), jobs)
    return anyio.run(_gather, funcs, jobs)
