"""
Compute Manager
===============

Decides how many local workers a batch of independent tasks (per-spec operator
builds, per-case simulations and inversions) may use, based on current system
load, and runs them with results returned in input order.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, TypeVar

import psutil
import structlog
from pydantic import BaseModel

logger = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class ResourceSnapshot:
    """System resource utilization data."""

    cpu_percent: float
    memory_percent: float
    rss_mb: float
    timestamp: float = 0.0


class ExecutionPlan(BaseModel):
    """Decision about how to execute a batch of tasks."""

    workers: int
    reasoning: str


class ComputeManager:
    """
    Plans and runs batches of independent CPU-bound tasks.

    Worker count shrinks to one when the machine is already loaded above the
    configured CPU or memory thresholds.
    """

    def __init__(
        self,
        max_workers: int = 0,
        cpu_threshold: float = 0.8,
        memory_threshold: float = 0.85,
    ):
        self.max_workers = max_workers
        self.thresholds = {"cpu_max": cpu_threshold, "memory_max": memory_threshold}

    def snapshot(self) -> ResourceSnapshot:
        """Get current system resource utilization."""
        try:
            memory = psutil.virtual_memory()
            rss = psutil.Process(os.getpid()).memory_info().rss
            return ResourceSnapshot(
                cpu_percent=psutil.cpu_percent(interval=None) / 100.0,
                memory_percent=memory.percent / 100.0,
                rss_mb=rss / 1024 / 1024,
                timestamp=time.time(),
            )
        except Exception as e:
            logger.error("resource_snapshot_failed", error=str(e))
            return ResourceSnapshot(0.5, 0.5, 0.0, time.time())

    def plan(self, n_tasks: int) -> ExecutionPlan:
        """Decide how many workers to use for ``n_tasks`` independent tasks."""
        if n_tasks <= 1:
            return ExecutionPlan(workers=1, reasoning="single task")

        resources = self.snapshot()
        if resources.cpu_percent > self.thresholds["cpu_max"]:
            return ExecutionPlan(
                workers=1, reasoning=f"CPU busy ({resources.cpu_percent:.0%})"
            )
        if resources.memory_percent > self.thresholds["memory_max"]:
            return ExecutionPlan(
                workers=1, reasoning=f"memory busy ({resources.memory_percent:.0%})"
            )

        available = psutil.cpu_count(logical=False) or os.cpu_count() or 1
        limit = self.max_workers or available
        workers = max(1, min(limit, available, n_tasks))
        return ExecutionPlan(workers=workers, reasoning=f"{available} cores available")

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply ``fn`` to every item; results keep the order of ``items``."""
        plan = self.plan(len(items))
        logger.debug("compute_plan", tasks=len(items), workers=plan.workers,
                     reasoning=plan.reasoning)
        if plan.workers == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            return list(pool.map(fn, items))
