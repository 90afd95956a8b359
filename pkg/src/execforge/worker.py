"""Run one job in an isolated directory, capture its metrics, and upload the outcome."""

from __future__ import annotations

import io
import json
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import TYPE_CHECKING, Any, Callable, Mapping

from .domain import ExecutionStatus, MetricRecord, MetricsLog
from .gateway import ConflictingDuplicate, KeyConflict, MetricsSink, UnknownKey, sha256_hex

if TYPE_CHECKING:
    from .environments import Environment
    from .scheduler import JobConfig

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
GRACE_S = 1.0
MAX_LOG_CHARS = 200_000


@dataclass(frozen=True)
class ExecutionResult:
    job: "JobConfig | None"
    status: ExecutionStatus
    metrics: MetricsLog
    execution_log: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "status", ExecutionStatus(self.status))
        if self.status is ExecutionStatus.SUCCEEDED and not len(self.metrics):
            raise ValueError("a succeeded execution must carry metrics")

    def to_json(self) -> dict[str, Any]:
        return {
            "job": self.job.to_json() if self.job is not None else None,
            "status": self.status.value,
            "metrics": self.metrics.to_list(),
            "terminal": self.metrics.terminal,
            "execution_log": self.execution_log,
            "metadata": self.metadata,
        }


def meta_key_for(codebase_key: str) -> str:
    return codebase_key[: -len(".zip")] + ".meta.json" if codebase_key.endswith(".zip") else codebase_key + ".meta.json"


def result_key_for(codebase_key: str, digest: str) -> str:
    prefix = codebase_key.rsplit("/", 1)[0] if "/" in codebase_key else "results"
    return f"{prefix}/results/{digest}.json"


def result_key(job: "JobConfig") -> str:
    return result_key_for(job.codebase_key, job.codebase_digest)


def has_result(store, codebase_key: str, digest: str) -> bool:
    try:
        store.digest_of(result_key_for(codebase_key, digest))
    except UnknownKey:
        return False
    return True


def parse_metrics_file(path: Path, terminal: bool) -> MetricsLog:
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if not isinstance(rec.get("step"), int) or not isinstance(rec.get("name"), str):
            raise ValueError(f"{METRICS_FILE}:{lineno}: bad record {line[:80]!r}")
        records.append(MetricRecord(rec["step"], rec["name"], float(rec["value"])))
    return MetricsLog(tuple(records), terminal)


def _extract(data: bytes, dest: Path) -> None:
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        for info in zf.infolist():
            rel = PurePosixPath(info.filename)
            if rel.is_absolute() or ".." in rel.parts:
                raise ValueError(f"unsafe path in artifact: {info.filename}")
            target = dest.joinpath(*rel.parts)
            if info.is_dir():
                target.mkdir(parents=True, exist_ok=True)
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(zf.read(info))


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def run_entrypoint(cmd: list[str], cwd: Path, budget_s: float) -> tuple[int | None, str]:
    """Run ``cmd`` under a hard wall-clock budget. Returns (exit code or None on timeout, output)."""
    proc = subprocess.Popen(
        cmd,
        cwd=cwd,
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        stdin=subprocess.DEVNULL,
        start_new_session=True,
    )
    try:
        out, _ = proc.communicate(timeout=budget_s)
        return proc.returncode, out.decode("utf-8", "replace")
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        try:
            out, _ = proc.communicate(timeout=GRACE_S)
        except subprocess.TimeoutExpired:
            out = b""
        return None, (out or b"").decode("utf-8", "replace")


def execute(
    job: "JobConfig",
    store,
    runners: "Mapping[str, Environment] | Environment",
    work_root: str | os.PathLike | None = None,
    clock: Callable[[], float] = time.time,
    keep_workdir: bool = False,
) -> ExecutionResult:
    """Unpack the job's codebase, run its entrypoint, and classify the outcome.

    Every failure mode is reported through the returned status; nothing is raised
    for a broken job.
    """
    env = runners if hasattr(runners, "command") else runners[job.env_id]
    started = clock()
    metadata: dict[str, Any] = {"env_id": job.env_id, "idea_text": None, "diff": None, "idea_id": None}
    try:
        meta = json.loads(store.get_artifact(meta_key_for(job.codebase_key)))
        metadata.update({k: meta.get(k) for k in ("idea_text", "diff", "idea_id")})
    except UnknownKey:
        pass

    def finish(status: ExecutionStatus, metrics: MetricsLog, log: str) -> ExecutionResult:
        metadata["timestamps"] = {"started": started, "finished": clock()}
        return ExecutionResult(job, status, metrics, log[-MAX_LOG_CHARS:], metadata)

    try:
        data = store.get_artifact(job.codebase_key)
    except UnknownKey as exc:
        return finish(ExecutionStatus.RUN_FAILED, MetricsLog(), f"artifact missing: {exc}")
    if sha256_hex(data) != job.codebase_digest:
        return finish(ExecutionStatus.RUN_FAILED, MetricsLog(), "artifact digest mismatch")

    if work_root is not None:
        Path(work_root).mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix=f"job-{job.codebase_digest[:12]}-", dir=work_root))
    metadata["workdir"] = str(workdir)
    try:
        try:
            _extract(data, workdir)
        except (zipfile.BadZipFile, ValueError) as exc:
            return finish(ExecutionStatus.RUN_FAILED, MetricsLog(), f"cannot unpack artifact: {exc}")
        cmd = list(job.entrypoint) or env.command()
        if not cmd:
            return finish(ExecutionStatus.RUN_FAILED, MetricsLog(), f"{job.env_id}: no entrypoint")
        code, output = run_entrypoint(cmd, workdir, job.time_budget_s)
        if code is None:
            status = ExecutionStatus.TIMED_OUT
            output += f"\n[worker] killed after {job.time_budget_s}s budget"
        elif code != 0:
            status = ExecutionStatus.RUN_FAILED
            output += f"\n[worker] exit code {code}"
        else:
            status = ExecutionStatus.SUCCEEDED
        mpath = workdir / METRICS_FILE
        metrics = MetricsLog((), code == 0)
        if mpath.exists():
            try:
                metrics = parse_metrics_file(mpath, code == 0)
            except (ValueError, KeyError, TypeError) as exc:
                output += f"\n[worker] unparseable metrics: {exc}"
                if status is ExecutionStatus.SUCCEEDED:
                    status = ExecutionStatus.RUN_FAILED
        if status is ExecutionStatus.SUCCEEDED and not len(metrics):
            status = ExecutionStatus.RUN_FAILED
            output += f"\n[worker] no {METRICS_FILE} records"
        return finish(status, metrics, output)
    finally:
        if not keep_workdir:
            shutil.rmtree(workdir, ignore_errors=True)


def upload_result(result: ExecutionResult, store, sink: MetricsSink) -> str:
    """Persist metrics to the sink and the log plus metadata to the store. Safe to retry."""
    job = result.job
    if job is None:
        raise ValueError("only job-backed results can be uploaded")
    key = result_key(job)
    try:
        sink.log_metrics(f"{job.env_id}-{job.codebase_digest[:16]}", result.metrics.records)
        store.put_artifact(key, json.dumps(result.to_json(), sort_keys=True).encode())
    except (ConflictingDuplicate, KeyConflict) as exc:
        # another process already executed this codebase; its result stays authoritative
        logger.warning("keeping earlier result for %s: %s", job.codebase_key, exc)
    return key


def read_result(store, job: "JobConfig") -> dict[str, Any]:
    return json.loads(store.get_artifact(result_key(job)))
