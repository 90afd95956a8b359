"""Poll the artifact store, deduplicate codebases by content, and hand jobs to free workers."""

from __future__ import annotations

import json
import logging
import os
import queue
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .environments import Environment, Resources
from .gateway import MetricsSink, StoreUnavailable, sha256_hex
from .worker import ExecutionResult, has_result, upload_result

logger = logging.getLogger(__name__)

STATE_FILE = "scheduler_state.json"
DEFAULT_TICK_S = 5.0


@dataclass(frozen=True)
class JobConfig:
    codebase_key: str
    codebase_digest: str
    env_id: str
    resource_requirement: Resources
    time_budget_s: float
    entrypoint: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.time_budget_s <= 0:
            raise ValueError("time budget must be positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "codebase_key": self.codebase_key,
            "codebase_digest": self.codebase_digest,
            "env_id": self.env_id,
            "resource_requirement": self.resource_requirement.to_json(),
            "time_budget_s": self.time_budget_s,
            "entrypoint": list(self.entrypoint),
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "JobConfig":
        return cls(
            d["codebase_key"],
            d["codebase_digest"],
            d["env_id"],
            Resources.from_json(d["resource_requirement"]),
            float(d["time_budget_s"]),
            tuple(d.get("entrypoint", ())),
        )


@dataclass
class WorkerSlot:
    slot_id: int
    capacity: Resources
    busy: bool = False


@dataclass
class SchedulerState:
    cursor: int = 0
    # every digest ever enqueued; never enqueued again
    executed_digests: set[str] = field(default_factory=set)
    completed_digests: set[str] = field(default_factory=set)
    pending: deque[JobConfig] = field(default_factory=deque)
    running: dict[int, JobConfig] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "cursor": self.cursor,
            "executed_digests": sorted(self.executed_digests),
            "completed_digests": sorted(self.completed_digests),
            "pending": [j.to_json() for j in self.pending],
            "running": [j.to_json() for _, j in sorted(self.running.items())],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SchedulerState":
        # jobs that were running when the previous process died go back to the queue
        requeue = [JobConfig.from_json(j) for j in d.get("running", [])]
        return cls(
            cursor=int(d.get("cursor", 0)),
            executed_digests=set(d.get("executed_digests", ())),
            completed_digests=set(d.get("completed_digests", ())),
            pending=deque(requeue + [JobConfig.from_json(j) for j in d.get("pending", [])]),
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SchedulerState":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls.from_json(json.loads(path.read_text()))


def make_job(key: str, digest: str, env: Environment) -> JobConfig:
    return JobConfig(key, digest, env.env_id, env.resource_requirement, env.time_budget_s, tuple(env.command()))


def poll_once(
    state: SchedulerState,
    store,
    envs: Environment | Mapping[str, Environment],
    env_of_key: Callable[[str], str] | None = None,
) -> list[JobConfig]:
    """Fetch keys added since the cursor and enqueue jobs for unseen digests.

    Raises :class:`StoreUnavailable` with ``state`` untouched if the store fails
    part way through.
    """
    keys, cursor = store.list_new(state.cursor)
    staged: list[JobConfig] = []
    seen = set(state.executed_digests)
    for key in keys:
        if not key.endswith(".zip"):
            continue
        digest = sha256_hex(store.get_artifact(key))
        if digest in seen:
            logger.debug("skip %s: digest %s already seen", key, digest[:12])
            continue
        seen.add(digest)
        if has_result(store, key, digest):
            logger.debug("skip %s: result already stored", key)
            continue
        if isinstance(envs, Environment):
            env = envs
        else:
            env = envs[env_of_key(key) if env_of_key else next(iter(envs))]
        staged.append(make_job(key, digest, env))
    state.cursor = cursor
    state.executed_digests |= seen
    state.pending.extend(staged)
    return staged


def dispatch(state: SchedulerState, slots: Iterable[WorkerSlot]) -> list[tuple[WorkerSlot, JobConfig]]:
    """Assign pending jobs in FIFO order to idle slots that can hold them."""
    idle = [s for s in slots if not s.busy]
    assignments = []
    keep: deque[JobConfig] = deque()
    while state.pending:
        job = state.pending.popleft()
        slot = next((s for s in idle if job.resource_requirement.fits(s.capacity)), None)
        if slot is None:
            keep.append(job)
            continue
        idle.remove(slot)
        slot.busy = True
        state.running[slot.slot_id] = job
        assignments.append((slot, job))
    state.pending = keep
    return assignments


class Scheduler:
    """Single-threaded poll/dispatch loop; jobs run on a thread pool and report back over a queue."""

    def __init__(
        self,
        store,
        envs: Environment | Mapping[str, Environment],
        execute_fn: Callable[[JobConfig], ExecutionResult],
        slots: list[WorkerSlot],
        sink: MetricsSink | None = None,
        state_path: str | os.PathLike | None = None,
        tick_s: float = DEFAULT_TICK_S,
        sleep: Callable[[float], None] = time.sleep,
        on_result: Callable[[ExecutionResult], None] | None = None,
    ):
        self.store = store
        self.envs = envs
        self.execute_fn = execute_fn
        self.slots = slots
        self.sink = sink or MetricsSink()
        self.state_path = state_path
        self.state = SchedulerState.load(state_path) if state_path else SchedulerState()
        self.tick_s = tick_s
        self.sleep = sleep
        self.on_result = on_result
        self._done: queue.Queue[tuple[int, JobConfig, ExecutionResult | BaseException]] = queue.Queue()
        self._pool = ThreadPoolExecutor(max_workers=max(1, len(slots)))
        self.results: list[ExecutionResult] = []

    def _run_job(self, slot_id: int, job: JobConfig) -> None:
        try:
            result = self.execute_fn(job)
            upload_result(result, self.store, self.sink)
            self._done.put((slot_id, job, result))
        except BaseException as exc:  # reported back to the loop, never lost
            self._done.put((slot_id, job, exc))

    def _persist(self) -> None:
        if self.state_path:
            self.state.save(self.state_path)

    def drain(self, block: bool = False) -> int:
        n = 0
        while True:
            try:
                slot_id, job, outcome = self._done.get(block=block and n == 0)
            except queue.Empty:
                break
            self.state.running.pop(slot_id, None)
            for s in self.slots:
                if s.slot_id == slot_id:
                    s.busy = False
            if isinstance(outcome, BaseException):
                logger.error("job %s crashed in the worker: %r", job.codebase_key, outcome)
            else:
                self.results.append(outcome)
                if self.on_result:
                    self.on_result(outcome)
            self.state.completed_digests.add(job.codebase_digest)
            n += 1
        if n:
            self._persist()
        return n

    def tick(self) -> list[JobConfig]:
        self.drain()
        try:
            new = poll_once(self.state, self.store, self.envs)
        except StoreUnavailable as exc:
            logger.warning("store unavailable, retrying next tick: %s", exc)
            new = []
        for slot, job in dispatch(self.state, self.slots):
            self._pool.submit(self._run_job, slot.slot_id, job)
        self._persist()
        return new

    @property
    def idle(self) -> bool:
        return not self.state.pending and not self.state.running

    def run(self, max_ticks: int | None = None, until_idle: bool = False) -> None:
        ticks = 0
        while max_ticks is None or ticks < max_ticks:
            self.tick()
            ticks += 1
            if until_idle and self.idle:
                break
            if self.state.running:
                # completions unblock early; otherwise wait one tick
                self.drain(block=False)
            self.sleep(self.tick_s)

    def run_until_drained(self) -> None:
        """Poll once, then dispatch until every pending and running job has finished."""
        self.tick()
        while not self.idle:
            if self.state.running:
                self.drain(block=True)
            assigned = dispatch(self.state, self.slots)
            for slot, job in assigned:
                self._pool.submit(self._run_job, slot.slot_id, job)
            if not assigned and not self.state.running and self.state.pending:
                logger.warning("%d jobs can never fit any worker slot", len(self.state.pending))
                break
        self._persist()

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
        self.drain()
        self._persist()
