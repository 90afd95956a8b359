"""Environment definitions, reward mapping, frozen-path guards and the synthetic environments."""

from __future__ import annotations

import fnmatch
import io
import itertools
import json
import math
import os
import re
import sys
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .domain import (
    ExecutionStatus,
    MetricRecord,
    MetricsLog,
    NoAccuracyRecords,
    NonFiniteLoss,
    Reward,
    RewardKind,
    reward_from_accuracy,
    reward_from_loss,
)
from .patching import DiffParseError, FileTree, touched_paths
from .worker import ExecutionResult

LOSS_METRIC = "val_loss"
ACCURACY_METRIC = "val_accuracy"
SYNTHETIC_METRIC = "reward"

PACKAGE_DIR = Path(__file__).resolve().parent
LATTICE_BASELINE_DIR = PACKAGE_DIR / "envs" / "lattice"


@dataclass(frozen=True)
class Resources:
    gpu_count: int = 0
    cpu_count: int = 1
    memory_gb: float = 1.0

    def fits(self, capacity: "Resources") -> bool:
        return (
            self.gpu_count <= capacity.gpu_count
            and self.cpu_count <= capacity.cpu_count
            and self.memory_gb <= capacity.memory_gb
        )

    @classmethod
    def from_json(cls, d: Mapping[str, Any] | None) -> "Resources":
        d = d or {}
        return cls(int(d.get("gpu_count", 0)), int(d.get("cpu_count", 1)), float(d.get("memory_gb", 1.0)))

    def to_json(self) -> dict[str, Any]:
        return {"gpu_count": self.gpu_count, "cpu_count": self.cpu_count, "memory_gb": self.memory_gb}


# --------------------------------------------------------------------------- synthetic specs


@dataclass(frozen=True)
class LatticeTuneSpec:
    """Reward ``base + amplitude * exp(-|x - optimum|^2 / width)`` on the integer lattice 0..9^4."""

    optimum: tuple[int, ...] = (7, 2, 5, 1)
    base: float = 0.3
    amplitude: float = 0.6
    width: float = 8.0
    low: int = 0
    high: int = 9
    baseline_point: tuple[int, ...] = (0, 0, 0, 0)

    _PATTERN = re.compile(r"set\s+x\s*=\s*\(([^)]*)\)", re.I)

    @property
    def dimension(self) -> int:
        return len(self.optimum)

    def reward(self, x: Sequence[int]) -> float:
        d2 = sum((int(a) - b) ** 2 for a, b in zip(x, self.optimum))
        return self.base + self.amplitude * math.exp(-d2 / self.width)

    def parse(self, idea_text: str) -> tuple[int, ...] | None:
        m = self._PATTERN.search(idea_text)
        if not m:
            return None
        parts = [p.strip() for p in m.group(1).split(",")]
        if len(parts) != self.dimension or not all(re.fullmatch(r"\d+", p) for p in parts):
            return None
        x = tuple(int(p) for p in parts)
        if not all(self.low <= v <= self.high for v in x):
            return None
        return x

    @staticmethod
    def format(x: Sequence[int]) -> str:
        return "set x=(" + ",".join(str(int(v)) for v in x) + ")"

    def points(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.low, self.high + 1), repeat=self.dimension))

    def all_rewards(self) -> np.ndarray:
        return np.array([self.reward(x) for x in self.points()])

    @property
    def baseline_reward(self) -> float:
        return self.reward(self.baseline_point)

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "lattice",
            "optimum": list(self.optimum),
            "base": self.base,
            "amplitude": self.amplitude,
            "width": self.width,
            "baseline_point": list(self.baseline_point),
        }


@dataclass(frozen=True)
class TwoModeIdea:
    name: str
    text: str
    complex: bool
    thinking_len: int


_EASY_TEXTS = {
    "E1": "replace RMSNorm with LayerNorm in every transformer block",
    "E2": "keep an EMA of model weights and validate with the EMA copy",
}
_COMPLEX_TEXTS = {
    "C1": "mixture of experts feed forward layers with a load balancing router",
    "C2": "learned rotary frequency schedule per attention head",
    "C3": "second order optimizer with kronecker factored preconditioning",
    "C4": "token level curriculum driven by per sample training loss",
    "C5": "sparse attention with learned block routing",
    "C6": "multi token prediction heads with an auxiliary objective",
    "C7": "adaptive gradient clipping from running norm statistics",
    "C8": "dynamic depth with early exit layers and confidence gating",
}


@dataclass(frozen=True)
class TwoModeSpec:
    """Ten-idea space: two easy ideas that always run, eight complex ones that rarely do."""

    easy_reward: float = 0.5
    complex_reward: float = 0.9
    complex_success_p: float = 0.3
    easy_thinking: int = 40
    complex_thinking: int = 400

    @property
    def ideas(self) -> tuple[TwoModeIdea, ...]:
        easy = [TwoModeIdea(k, f"{k}: {v}", False, self.easy_thinking) for k, v in _EASY_TEXTS.items()]
        hard = [TwoModeIdea(k, f"{k}: {v}", True, self.complex_thinking) for k, v in _COMPLEX_TEXTS.items()]
        return tuple(easy + hard)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(i.name for i in self.ideas)

    def idea(self, name: str) -> TwoModeIdea:
        for i in self.ideas:
            if i.name == name:
                return i
        raise KeyError(name)

    def expected_rewards(self) -> np.ndarray:
        return np.array(
            [self.complex_reward * self.complex_success_p if i.complex else self.easy_reward for i in self.ideas]
        )

    def success_probs(self) -> np.ndarray:
        return np.array([self.complex_success_p if i.complex else 1.0 for i in self.ideas])

    def thinking_lengths(self) -> np.ndarray:
        return np.array([i.thinking_len for i in self.ideas], dtype=float)

    def parse(self, idea_text: str) -> TwoModeIdea | None:
        m = re.match(r"\s*([EC]\d+)\b", idea_text)
        if not m:
            return None
        try:
            return self.idea(m.group(1))
        except KeyError:
            return None

    def to_json(self) -> dict[str, Any]:
        return {"kind": "twomode", "complex_success_p": self.complex_success_p}


SyntheticSpec = LatticeTuneSpec | TwoModeSpec


# --------------------------------------------------------------------------- environment


@dataclass
class Environment:
    env_id: str
    reward_kind: RewardKind
    frozen_paths: tuple[str, ...] = ()
    resource_requirement: Resources = field(default_factory=Resources)
    time_budget_s: float = 60.0
    entrypoint: tuple[str, ...] = ()
    baseline_dir: str | None = None
    validation_interval: int | None = None
    synthetic: SyntheticSpec | None = None
    baseline_reward: float | None = None

    def __post_init__(self) -> None:
        self.reward_kind = RewardKind(self.reward_kind)
        self.frozen_paths = tuple(self.frozen_paths)
        self.entrypoint = tuple(self.entrypoint)
        if self.time_budget_s <= 0:
            raise ValueError("time_budget_s must be positive")
        if self.baseline_reward is None and isinstance(self.synthetic, LatticeTuneSpec):
            self.baseline_reward = self.synthetic.baseline_reward
        if self.baseline_reward is None and isinstance(self.synthetic, TwoModeSpec):
            self.baseline_reward = 0.0

    @property
    def beta(self) -> float:
        if self.baseline_reward is None:
            raise ValueError(f"{self.env_id}: baseline reward not computed yet")
        return self.baseline_reward

    def command(self) -> list[str]:
        return [sys.executable if part == "{python}" else part for part in self.entrypoint]

    def baseline_tree(self) -> FileTree:
        if self.baseline_dir is None:
            raise ValueError(f"{self.env_id}: no baseline codebase configured")
        return load_tree(self.baseline_dir)

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "env_id": self.env_id,
            "reward_kind": self.reward_kind.value,
            "frozen_paths": list(self.frozen_paths),
            "resource_requirement": self.resource_requirement.to_json(),
            "time_budget_s": self.time_budget_s,
            "entrypoint": list(self.entrypoint),
            "baseline_dir": self.baseline_dir,
        }
        if self.validation_interval is not None:
            d["validation_interval"] = self.validation_interval
        if self.synthetic is not None:
            d["synthetic"] = self.synthetic.to_json()
        if self.baseline_reward is not None:
            d["baseline_reward"] = self.baseline_reward
        return d


def _synthetic_from_json(d: Mapping[str, Any] | None) -> SyntheticSpec | None:
    if not d:
        return None
    kind = d.get("kind")
    if kind == "lattice":
        return LatticeTuneSpec(
            optimum=tuple(d.get("optimum", (7, 2, 5, 1))),
            base=float(d.get("base", 0.3)),
            amplitude=float(d.get("amplitude", 0.6)),
            width=float(d.get("width", 8.0)),
            baseline_point=tuple(d.get("baseline_point", (0, 0, 0, 0))),
        )
    if kind == "twomode":
        return TwoModeSpec(complex_success_p=float(d.get("complex_success_p", 0.3)))
    raise ValueError(f"unknown synthetic environment kind {kind!r}")


def environment_from_json(d: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> Environment:
    for key in ("env_id", "reward_kind"):
        if key not in d:
            raise ValueError(f"environment manifest missing {key!r}")
    baseline_dir = d.get("baseline_dir")
    if baseline_dir == "@lattice":
        baseline_dir = str(LATTICE_BASELINE_DIR)
    elif baseline_dir and base_dir is not None and not os.path.isabs(baseline_dir):
        baseline_dir = str(Path(base_dir) / baseline_dir)
    return Environment(
        env_id=d["env_id"],
        reward_kind=RewardKind(d["reward_kind"]),
        frozen_paths=tuple(d.get("frozen_paths", ())),
        resource_requirement=Resources.from_json(d.get("resource_requirement")),
        time_budget_s=float(d.get("time_budget_s", 60.0)),
        entrypoint=tuple(d.get("entrypoint", ())),
        baseline_dir=baseline_dir,
        validation_interval=d.get("validation_interval"),
        synthetic=_synthetic_from_json(d.get("synthetic")),
        baseline_reward=d.get("baseline_reward"),
    )


def load_manifest(path: str | os.PathLike) -> Environment:
    """Read an ``env.json`` manifest; relative ``baseline_dir`` resolves against its folder."""
    path = Path(path)
    return environment_from_json(json.loads(path.read_text()), base_dir=path.parent)


def lattice_environment(spec: LatticeTuneSpec | None = None, process: bool = False) -> Environment:
    """LatticeTune as a pure function (default) or as a real subprocess environment."""
    spec = spec or LatticeTuneSpec()
    return Environment(
        env_id="lattice",
        reward_kind=RewardKind.SYNTHETIC,
        frozen_paths=("evaluate.py",),
        resource_requirement=Resources(0, 1, 0.5),
        time_budget_s=30.0,
        entrypoint=("{python}", "train.py") if process else (),
        baseline_dir=str(LATTICE_BASELINE_DIR) if process else None,
        synthetic=spec,
    )


def twomode_environment(spec: TwoModeSpec | None = None) -> Environment:
    return Environment(env_id="twomode", reward_kind=RewardKind.SYNTHETIC, synthetic=spec or TwoModeSpec())


# --------------------------------------------------------------------------- file trees


def load_tree(path: str | os.PathLike) -> FileTree:
    """Read a baseline codebase from a directory or a ``.zip`` file."""
    path = Path(path)
    tree: FileTree = {}
    if path.is_file() and zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                if not name.endswith("/"):
                    tree[name] = zf.read(name).decode("utf-8")
        return tree
    if not path.is_dir():
        raise FileNotFoundError(path)
    for p in sorted(path.rglob("*")):
        if p.is_file() and "__pycache__" not in p.parts:
            tree[p.relative_to(path).as_posix()] = p.read_text()
    return tree


def tree_from_zip_bytes(data: bytes) -> FileTree:
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        return {n: zf.read(n).decode("utf-8") for n in zf.namelist() if not n.endswith("/")}


# --------------------------------------------------------------------------- guards and rewards


@dataclass(frozen=True)
class GuardResult:
    ok: bool
    paths: tuple[str, ...] = ()


def guard_frozen_paths(diff: str, env: Environment | Sequence[str]) -> GuardResult:
    """Reject diffs whose file headers touch any frozen glob."""
    globs = env.frozen_paths if isinstance(env, Environment) else tuple(env)
    try:
        paths = touched_paths(diff)
    except DiffParseError:
        return GuardResult(True)
    hits = sorted(p for p in paths if any(fnmatch.fnmatchcase(p, g) for g in globs))
    return GuardResult(not hits, tuple(hits))


def evaluate(env: Environment, metrics: MetricsLog, status: ExecutionStatus) -> Reward:
    """Map a run's metrics to its reward; any failure or degenerate log maps to 0."""
    zero = Reward(0.0, env.reward_kind)
    if ExecutionStatus(status) is not ExecutionStatus.SUCCEEDED:
        return zero
    try:
        if env.reward_kind is RewardKind.ACCURACY:
            return reward_from_accuracy(metrics, ACCURACY_METRIC)
        if env.reward_kind is RewardKind.RECIPROCAL_LOSS:
            loss = metrics.last(LOSS_METRIC)
            return zero if loss is None else reward_from_loss(loss)
        value = metrics.last(SYNTHETIC_METRIC)
        if value is None or not math.isfinite(value) or value < 0:
            return zero
        return Reward(value, RewardKind.SYNTHETIC)
    except (NoAccuracyRecords, NonFiniteLoss, ValueError):
        return zero


def synth_execute(env: Environment | SyntheticSpec, idea_text: str, seed: int | Sequence[int] = 0) -> ExecutionResult:
    """Execute an idea against a synthetic environment without any subprocess."""
    spec = env.synthetic if isinstance(env, Environment) else env
    env_id = env.env_id if isinstance(env, Environment) else type(spec).__name__
    meta = {"idea_text": idea_text, "diff": None, "env_id": env_id, "timestamps": {}}
    if isinstance(spec, LatticeTuneSpec):
        x = spec.parse(idea_text)
        if x is None:
            return ExecutionResult(None, ExecutionStatus.PATCH_FAILED, MetricsLog(), "could not parse a lattice setting", meta)
        r = spec.reward(x)
        log = f"x={x} reward={r!r}"
        return ExecutionResult(
            None, ExecutionStatus.SUCCEEDED, MetricsLog((MetricRecord(0, SYNTHETIC_METRIC, r),), True), log, meta
        )
    if isinstance(spec, TwoModeSpec):
        idea = spec.parse(idea_text)
        if idea is None:
            return ExecutionResult(None, ExecutionStatus.PATCH_FAILED, MetricsLog(), "unknown idea", meta)
        if idea.complex:
            draw = float(np.random.default_rng(seed).random())
            if draw >= spec.complex_success_p:
                return ExecutionResult(
                    None, ExecutionStatus.RUN_FAILED, MetricsLog(), f"{idea.name} crashed (draw={draw:.4f})", meta
                )
            r = spec.complex_reward
        else:
            r = spec.easy_reward
        return ExecutionResult(
            None, ExecutionStatus.SUCCEEDED, MetricsLog((MetricRecord(0, SYNTHETIC_METRIC, r),), True), idea.name, meta
        )
    raise TypeError(f"{env_id} is not a synthetic environment")
