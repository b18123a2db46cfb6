import concurrent.futures as cf
import os
from typing import Callable, Iterable, List, Optional, TypeVar

from src.utils.logger import LoggerFactory

T = TypeVar("T")
R = TypeVar("R")

logger = LoggerFactory.get_logger("parallel")


def available_jobs() -> int:
    return os.cpu_count() or 1


def parallel_map(func: Callable[[T], R], tasks: Iterable[T], jobs: Optional[int] = 1) -> List[R]:
    """Map ``func`` over ``tasks`` keeping task order in the result.

    ``func`` must be a module-level callable when ``jobs > 1`` (process pool pickling).
    """
    tasks = list(tasks)
    jobs = available_jobs() if jobs is None or jobs <= 0 else jobs
    if jobs == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    workers = min(jobs, len(tasks))
    logger.debug(f"Dispatching {len(tasks)} tasks to {workers} workers")
    with cf.ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, tasks))
