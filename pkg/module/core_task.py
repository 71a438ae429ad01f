import time
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List

from .core_types import TaskStatus

logger = logging.getLogger(__name__)


class SimulationTask:
    """One Monte Carlo run"""

    def __init__(self, task_id: int):
        self.task_id = task_id
        self.status = TaskStatus.PENDING
        self.started_at: float | None = None
        self.completed_at: float | None = None
        self.result: Any = None
        self.error: str | None = None

    def mark_running(self) -> None:
        self.status = TaskStatus.RUNNING
        self.started_at = time.perf_counter()

    def mark_completed(self, result: Any) -> None:
        self.status = TaskStatus.COMPLETED
        self.completed_at = time.perf_counter()
        self.result = result

    def mark_failed(self, error: str) -> None:
        self.status = TaskStatus.FAILED
        self.completed_at = time.perf_counter()
        self.error = error

    def get_duration(self) -> float:
        """Seconds spent running; 0 for a task that never started"""
        if self.started_at is None:
            return 0.0
        end = self.completed_at if self.completed_at is not None else time.perf_counter()
        return end - self.started_at


class BatchProcessor:
    """Runs tasks on a thread pool and returns them in submission order

    Each task must carry everything it needs (its own random stream), so the
    results do not depend on the number of workers.
    """

    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, int(max_workers))
        self.tasks: List[SimulationTask] = []

    def add_task(self, task: SimulationTask) -> None:
        self.tasks.append(task)

    def _run_one(self, runner: Callable[[SimulationTask], Any], task: SimulationTask) -> SimulationTask:
        task.mark_running()
        try:
            task.mark_completed(runner(task))
        except Exception as e:
            task.mark_failed(str(e))
            logger.debug(f"[BatchProcessor] task {task.task_id} failed: {e}")
        return task

    def process_batch(self, runner: Callable[[SimulationTask], Any]) -> List[SimulationTask]:
        if not self.tasks:
            return []
        tasks, self.tasks = self.tasks, []
        logger.debug(f"[BatchProcessor] running {len(tasks)} tasks on {self.max_workers} threads")
        if self.max_workers == 1:
            done = [self._run_one(runner, t) for t in tasks]
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                done = list(executor.map(lambda t: self._run_one(runner, t), tasks))
        failed = sum(t.status is TaskStatus.FAILED for t in done)
        if failed:
            logger.info(f"[BatchProcessor] {failed} of {len(done)} tasks failed")
        durations = [t.get_duration() for t in done]
        logger.debug(f"[BatchProcessor] mean task time {sum(durations) / len(durations):.4f}s, "
                     f"slowest {max(durations):.4f}s")
        return done
