import asyncio
import logging
import traceback
from concurrent.futures import Executor, ProcessPoolExecutor
from typing import Any, Callable, Dict, List, Optional

from pydantic import BaseModel, ConfigDict

logger = logging.getLogger(__name__)


class ReplicationJob(BaseModel):
    """One independent unit of work: a picklable function and its keyword arguments."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    key: str
    func: Callable[..., Any]
    kwargs: Dict[str, Any] = {}
    seed: int = 0


class ReplicationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    key: str
    seed: int
    ok: bool
    value: Any = None
    error: Optional[str] = None
    error_type: Optional[str] = None


def _execute(job: ReplicationJob) -> ReplicationResult:
    try:
        value = job.func(seed=job.seed, **job.kwargs)
    except Exception as exc:
        logger.debug(traceback.format_exc())
        return ReplicationResult(key=job.key, seed=job.seed, ok=False, error=str(exc), error_type=type(exc).__name__)
    return ReplicationResult(key=job.key, seed=job.seed, ok=True, value=value)


class AsyncReplicationRunner:
    """
    Runs independent replications concurrently, at most ``max_concurrent`` at a time.
    With more than one worker the jobs go to a process pool; a failing job is
    recorded in its result and does not stop the others.
    """

    def __init__(self, max_concurrent: int = 1):
        if max_concurrent < 1:
            raise ValueError(f"max_concurrent must be >= 1, got {max_concurrent}")
        self.max_concurrent = max_concurrent
        self.logger = logging.getLogger(self.__class__.__name__)

    async def _run_job(self, semaphore: asyncio.Semaphore, executor: Optional[Executor], job: ReplicationJob) -> ReplicationResult:
        await semaphore.acquire()
        try:
            loop = asyncio.get_running_loop()
            result = await loop.run_in_executor(executor, _execute, job)
            if result.ok:
                self.logger.info("Replication %s (seed %d) finished", job.key, job.seed)
            else:
                self.logger.warning("Replication %s (seed %d) failed: %s: %s", job.key, job.seed, result.error_type, result.error)
            return result
        finally:
            semaphore.release()

    async def run_all(self, jobs: List[ReplicationJob]) -> List[ReplicationResult]:
        semaphore = asyncio.Semaphore(self.max_concurrent)
        if self.max_concurrent == 1:
            return await asyncio.gather(*(self._run_job(semaphore, None, j) for j in jobs))
        with ProcessPoolExecutor(max_workers=self.max_concurrent) as executor:
            return await asyncio.gather(*(self._run_job(semaphore, executor, j) for j in jobs))


def run_replications(jobs: List[ReplicationJob], max_concurrent: int = 1) -> List[ReplicationResult]:
    """Blocking entry point; results come back in job order."""
    return asyncio.run(AsyncReplicationRunner(max_concurrent).run_all(jobs))
