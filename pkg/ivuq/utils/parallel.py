"""
Worker-pool helper shared by generation, ensemble training and prediction.

Tries joblib first; if the pool cannot be used, falls back to a single core.
"""
import sys
from typing import Any, Callable, List, Optional, Sequence

from joblib import Parallel, delayed
from tqdm import tqdm

from ivuq.config import settings
from ivuq.utils.logger import logger


def progress(iterable, desc: str = "", total: Optional[int] = None, **kwargs):
    """tqdm progress bar, silent when stderr is not a terminal"""
    return tqdm(
        iterable,
        desc=desc,
        total=total,
        disable=not sys.stderr.isatty(),
        position=0,
        leave=False,
        **kwargs,
    )


def run_parallel(
    func: Callable[..., Any],
    items: Sequence[Any],
    workers: Optional[int] = None,
    desc: str = "",
) -> List[Any]:
    """
    Map ``func`` over ``items`` keeping input order.

    Args:
        func: picklable callable taking one item
        items: work items, each carrying whatever seed it needs
        workers: pool size; <2 runs serially
        desc: progress bar label
    """
    n_jobs = settings.workers if workers is None else workers
    if n_jobs is not None and n_jobs >= 2 and len(items) > 1:
        try:
            return list(
                Parallel(n_jobs=n_jobs, backend=settings.parallel_backend)(
                    delayed(func)(item) for item in progress(items, desc=desc)
                )
            )
        except (OSError, RuntimeError, ImportError) as e:
            logger.warning(f"并行执行失败，回退到单核: {e}")
    return [func(item) for item in progress(items, desc=desc)]
