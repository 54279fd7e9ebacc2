"""
Unit tests for the parallel executor
"""

import pytest

from deferloop.parallel import ParallelExecutor


def _scale(item, factor=1):
    if item < 0:
        raise ValueError(f"negative item {item}")
    return item * factor


@pytest.mark.parametrize("workers", [1, 4])
def test_execute_parallel_keeps_order(workers):
    """Test results come back in item order"""
    executor = ParallelExecutor(max_workers=workers)
    assert executor.execute_parallel(_scale, list(range(10)), factor=3) == [3 * i for i in range(10)]


def test_execute_parallel_raises_first_error():
    """Test a failing item propagates"""
    executor = ParallelExecutor(max_workers=2)
    with pytest.raises(ValueError, match="negative"):
        executor.execute_parallel(_scale, [1, -1, 2])


def test_invalid_worker_count():
    """Test at least one worker is required"""
    with pytest.raises(ValueError):
        ParallelExecutor(max_workers=0)
