"""Core records shared by every stage: ideas, trajectories, metrics and rewards."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence


class NonFiniteLoss(ValueError):
    """Loss is NaN, infinite or not strictly positive."""


class NoAccuracyRecords(ValueError):
    """A metrics log carries no accuracy values."""


class IdeaSource(str, enum.Enum):
    SAMPLED = "sampled"
    EXPLOIT = "exploit"
    EXPLORE = "explore"
    RL_ROLLOUT = "rl_rollout"


class ExecutionStatus(str, enum.Enum):
    SUCCEEDED = "succeeded"
    PATCH_FAILED = "patch_failed"
    RUN_FAILED = "run_failed"
    TIMED_OUT = "timed_out"
    GUARD_VIOLATION = "guard_violation"


class RewardKind(str, enum.Enum):
    ACCURACY = "accuracy"
    RECIPROCAL_LOSS = "reciprocal_loss"
    SYNTHETIC = "synthetic"


def count_tokens(text: str | None) -> int:
    """Whitespace token count; ``None`` counts as zero."""
    return len(text.split()) if text else 0


@dataclass(frozen=True)
class Idea:
    id: str
    idea_text: str
    thinking_text: str | None = None
    source: IdeaSource = IdeaSource.SAMPLED
    parent_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "source", IdeaSource(self.source))
        object.__setattr__(self, "parent_ids", tuple(self.parent_ids))
        if self.source is IdeaSource.EXPLOIT and not self.parent_ids:
            raise ValueError(f"exploit idea {self.id} has no parents")

    @property
    def thinking_len(self) -> int:
        return count_tokens(self.thinking_text)

    @property
    def idea_len(self) -> int:
        return count_tokens(self.idea_text)


@dataclass(frozen=True)
class MetricRecord:
    step: int
    name: str
    value: float


@dataclass(frozen=True)
class MetricsLog:
    records: tuple[MetricRecord, ...] = ()
    terminal: bool = False

    def __post_init__(self) -> None:
        recs = tuple(r if isinstance(r, MetricRecord) else MetricRecord(*r) for r in self.records)
        object.__setattr__(self, "records", recs)
        last: dict[str, int] = {}
        for r in recs:
            if r.step < last.get(r.name, r.step):
                raise ValueError(f"metric {r.name!r} steps go backwards at step {r.step}")
            last[r.name] = r.step

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MetricRecord]:
        return iter(self.records)

    def series(self, name: str) -> list[MetricRecord]:
        return [r for r in self.records if r.name == name]

    def last(self, name: str) -> float | None:
        s = self.series(name)
        return s[-1].value if s else None

    def to_list(self) -> list[list[Any]]:
        return [[r.step, r.name, r.value] for r in self.records]

    @classmethod
    def from_list(cls, rows: Iterable[Sequence[Any]], terminal: bool = False) -> "MetricsLog":
        return cls(tuple(MetricRecord(int(s), str(n), float(v)) for s, n, v in rows), terminal)


@dataclass(frozen=True)
class Reward:
    value: float
    kind: RewardKind

    def __post_init__(self) -> None:
        if not self.value >= 0:
            raise ValueError(f"reward must be non-negative, got {self.value}")
        if self.kind is RewardKind.ACCURACY and self.value > 1:
            raise ValueError(f"accuracy reward above 1: {self.value}")


def reward_from_loss(loss: float) -> Reward:
    """Reciprocal of the final validation loss."""
    if not (math.isfinite(loss) and loss > 0):
        raise NonFiniteLoss(f"cannot derive a reward from loss {loss!r}")
    return Reward(1.0 / loss, RewardKind.RECIPROCAL_LOSS)


def reward_from_accuracy(series: MetricsLog | Sequence[tuple[int, float]], name: str = "val_accuracy") -> Reward:
    """Peak validation accuracy over a run.

    ``series`` is either a :class:`MetricsLog` (records named ``name`` are used)
    or a bare list of ``(step, accuracy)`` pairs.
    """
    if isinstance(series, MetricsLog):
        values = [r.value for r in series.series(name)]
    else:
        values = [float(v) for _, v in series]
    if not values:
        raise NoAccuracyRecords("no accuracy records in series")
    return Reward(max(values), RewardKind.ACCURACY)


TRAJECTORY_FIELDS = (
    "run_id",
    "epoch",
    "idea_id",
    "idea_text",
    "thinking_text",
    "source",
    "parent_ids",
    "status",
    "reward",
    "metrics",
    "execution_log_ref",
    "timestamps",
)


@dataclass(frozen=True)
class Trajectory:
    idea: Idea
    epoch: int
    status: ExecutionStatus
    reward: float = 0.0
    metrics: MetricsLog = field(default_factory=MetricsLog)
    execution_log: str = ""
    diff: str | None = None
    codebase_key: str | None = None
    timestamps: dict[str, int] = field(default_factory=dict)
    execution_log_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "status", ExecutionStatus(self.status))
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.reward < 0:
            raise ValueError("reward must be >= 0")
        if self.status is not ExecutionStatus.SUCCEEDED and self.reward != 0:
            raise ValueError(f"{self.idea.id}: failed trajectory must carry reward 0")

    @property
    def succeeded(self) -> bool:
        return self.status is ExecutionStatus.SUCCEEDED

    def to_record(self, run_id: str) -> dict[str, Any]:
        return {
            "run_id": run_id,
            "epoch": self.epoch,
            "idea_id": self.idea.id,
            "idea_text": self.idea.idea_text,
            "thinking_text": self.idea.thinking_text,
            "source": self.idea.source.value,
            "parent_ids": list(self.idea.parent_ids),
            "status": self.status.value,
            "reward": self.reward,
            "metrics": self.metrics.to_list(),
            "execution_log_ref": self.execution_log_ref,
            "timestamps": dict(self.timestamps),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Trajectory":
        idea = Idea(
            id=rec["idea_id"],
            idea_text=rec["idea_text"],
            thinking_text=rec.get("thinking_text"),
            source=IdeaSource(rec["source"]),
            parent_ids=tuple(rec.get("parent_ids") or ()),
        )
        return cls(
            idea=idea,
            epoch=int(rec["epoch"]),
            status=ExecutionStatus(rec["status"]),
            reward=float(rec["reward"]),
            metrics=MetricsLog.from_list(rec.get("metrics") or ()),
            timestamps=dict(rec.get("timestamps") or {}),
            execution_log_ref=rec.get("execution_log_ref"),
        )


def dump_trajectories(trajs: Iterable[Trajectory], run_id: str) -> str:
    """Serialize to JSONL; output is byte-stable for equal inputs."""
    lines = [json.dumps(t.to_record(run_id), sort_keys=True, ensure_ascii=False) for t in trajs]
    return "".join(line + "\n" for line in lines)


def load_trajectories(text: str) -> tuple[str | None, list[Trajectory]]:
    run_id = None
    out = []
    # split on newline only: records may hold other line-break characters unescaped
    for line in text.split("\n"):
        if not line.strip():
            continue
        rec = json.loads(line)
        run_id = rec.get("run_id", run_id)
        out.append(Trajectory.from_record(rec))
    return run_id, out
