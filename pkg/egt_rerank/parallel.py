import os
from typing import Any, Callable, Iterable, Optional, Sequence

from joblib import Parallel, delayed

import egt_rerank
from .exceptions import ValidationError


def set_threads(threads: Optional[int] = None) -> int:
    """Set the number of workers used by the following stages.
    Args:
        threads (int): Number of workers. Default: machine parallelism.
    Returns:
        threads (int): The value now in use.
    """
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ValidationError(f"Invalid {threads=}")
    egt_rerank.THREADS = int(threads)
    return egt_rerank.THREADS


def get_threads() -> int:
    """ Automatically set the thread count, if not already there. """
    if egt_rerank.THREADS is None:
        set_threads()
    return egt_rerank.THREADS


def chunked(items: Sequence[Any], size: int) -> list[Sequence[Any]]:
    """ Split a sequence into consecutive chunks of at most size items. """
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_parallel(
    func: Callable[..., Any], jobs: Iterable[tuple], threads: Optional[int] = None
) -> list[Any]:
    """Run func(*job) for every job and return the results in job order.
    Jobs run inline for a single worker so tracebacks stay readable.
    Args:
        func (callable): The function to run.
        jobs (iterable): Argument tuples, one per call.
        threads (int): Number of workers. Default: get_threads().
    """
    threads = get_threads() if threads is None else threads
    jobs = list(jobs)
    if threads == 1 or len(jobs) <= 1:
        return [func(*job) for job in jobs]
    return Parallel(n_jobs=threads, prefer="threads")(delayed(func)(*job) for job in jobs)
