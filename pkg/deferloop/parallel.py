"""
Parallel fan-out for sweep grid points and repetitions.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Sequence


class ParallelExecutor:
    """
    Execute independent runs in parallel using a thread pool.

    The numerical work happens inside numpy/scipy, which release the GIL for
    the heavy kernels.
    """

    def __init__(self, max_workers: int = 4):
        """
        Initialize parallel executor.

        Args:
            max_workers: Maximum number of worker threads (1 runs inline)
        """
        if max_workers < 1:
            raise ValueError(f"max_workers must be at least 1, got {max_workers}")
        self.max_workers = max_workers

    def execute_parallel(
        self,
        func: Callable,
        items: Sequence[Any],
        **kwargs,
    ) -> List[Any]:
        """
        Execute a function in parallel over a list of items.

        Args:
            func: Function to execute
            items: Items to process
            **kwargs: Additional arguments to pass to func

        Returns:
            Results in the order of ``items``

        Raises:
            Exception: The first error raised by any call, after all calls finished
        """
        if self.max_workers == 1 or len(items) <= 1:
            return [func(item, **kwargs) for item in items]

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(func, item, **kwargs) for item in items]
            errors = [f.exception() for f in futures]

        for error in errors:
            if error is not None:
                raise error
        return [f.result() for f in futures]
