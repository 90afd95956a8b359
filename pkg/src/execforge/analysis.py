"""Benchmark metrics, idea-type stratification and collapse diagnostics over trajectory logs."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .domain import Idea, Trajectory, load_trajectories
from .gateway import ModelEndpoint, ModelRequest

logger = logging.getLogger(__name__)


class IdeaClass(str, enum.Enum):
    HYPER_PARAMETER = "hyper_parameter"
    ALGORITHMIC = "algorithmic"


class JudgeUnavailable(Exception):
    pass


@dataclass(frozen=True)
class Performance:
    average: float | None
    best: float | None

    @property
    def empty(self) -> bool:
        return self.average is None


EMPTY = Performance(None, None)


def completion_rate(trajs: Sequence[Trajectory]) -> float:
    if not trajs:
        return 0.0
    return sum(t.succeeded for t in trajs) / len(trajs)


def to_loss(reward: float) -> float:
    return 1.0 / reward


def avg_best_performance(trajs: Sequence[Trajectory], loss_domain: bool = False) -> Performance:
    """Average and best over succeeded runs only.

    In the loss domain rewards are shown as ``1/reward`` and "best" is the minimum.
    """
    values = [t.reward for t in trajs if t.succeeded]
    if not values:
        return EMPTY
    if loss_domain:
        losses = [to_loss(v) for v in values]
        return Performance(math.fsum(losses) / len(losses), min(losses))
    return Performance(math.fsum(values) / len(values), max(values))


# --------------------------------------------------------------------------- idea classification


class Judge(Protocol):
    def classify(self, idea: Idea) -> IdeaClass: ...


class RuleJudge:
    """LatticeTune coordinate settings are hyper-parameter changes; everything else is algorithmic."""

    pattern = re.compile(r"^\s*set\s+x\s*=\s*\([\d\s,]*\)\s*$", re.I)

    def classify(self, idea: Idea) -> IdeaClass:
        return IdeaClass.HYPER_PARAMETER if self.pattern.match(idea.idea_text) else IdeaClass.ALGORITHMIC


class ScriptedJudge:
    """Looks labels up by idea id (falling back to idea text)."""

    def __init__(self, labels: Mapping[str, str]):
        self.labels = {k: IdeaClass(v) for k, v in labels.items()}

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedJudge":
        return cls(json.loads(Path(path).read_text()))

    def classify(self, idea: Idea) -> IdeaClass:
        for k in (idea.id, idea.idea_text):
            if k in self.labels:
                return self.labels[k]
        raise JudgeUnavailable(f"no scripted label for {idea.id}")


class ModelJudge:
    """Asks a model endpoint; the first answer token decides the class."""

    PROMPT = (
        "Classify the research idea below as HYPER_PARAMETER (achievable only by changing existing "
        "configuration values) or ALGORITHMIC (needs new code). Answer with one word.\n\nIdea: {idea}\n"
    )

    def __init__(self, endpoint: ModelEndpoint):
        self.endpoint = endpoint

    def classify(self, idea: Idea) -> IdeaClass:
        try:
            (c,) = self.endpoint.generate(ModelRequest(self.PROMPT.format(idea=idea.idea_text), 1, 16, 0.0))
        except Exception as exc:
            raise JudgeUnavailable(str(exc)) from exc
        word = c.body_text.strip().upper()
        if word.startswith("HYPER"):
            return IdeaClass.HYPER_PARAMETER
        if word.startswith("ALGO"):
            return IdeaClass.ALGORITHMIC
        raise JudgeUnavailable(f"unparseable judge answer {c.body_text[:40]!r}")


def classify_idea(idea: Idea, judge: Judge) -> IdeaClass:
    label = judge.classify(idea)
    logger.info("judge: %s -> %s", idea.id, label.value)
    return label


@dataclass(frozen=True)
class StratifiedRow:
    idea_class: IdeaClass
    percentage: float
    performance: Performance

    def to_json(self) -> dict[str, Any]:
        return {
            "class": self.idea_class.value,
            "percentage": self.percentage,
            "average": self.performance.average,
            "best": self.performance.best,
        }


def stratified_table(
    trajs: Sequence[Trajectory], classes: Mapping[str, IdeaClass] | Sequence[IdeaClass], loss_domain: bool = False
) -> list[StratifiedRow]:
    """One row per class: share of all ideas plus average/best over that class's successes."""
    if not isinstance(classes, Mapping):
        classes = {t.idea.id: c for t, c in zip(trajs, classes)}
    missing = [t.idea.id for t in trajs if t.idea.id not in classes]
    if missing:
        raise ValueError(f"unclassified trajectories: {missing[:5]}")
    rows = []
    for cls in IdeaClass:
        group = [t for t in trajs if classes[t.idea.id] is cls]
        pct = 100.0 * len(group) / len(trajs) if trajs else 0.0
        rows.append(StratifiedRow(cls, pct, avg_best_performance(group, loss_domain)))
    return rows


# --------------------------------------------------------------------------- collapse diagnostics


_TOKEN_STRIP = re.compile(r"^\W+|\W+$")


def idea_tokens(text: str) -> list[str]:
    return [_TOKEN_STRIP.sub("", tok).lower() for tok in text.split()]


def matches_any(text: str, patterns: Sequence[str]) -> bool:
    regexes = [re.compile(p, re.I) for p in patterns]
    return any(r.fullmatch(tok) for tok in idea_tokens(text) for r in regexes)


def keyword_convergence(ideas_by_epoch: Sequence[Sequence[Idea | str]], patterns: Sequence[str]) -> list[int]:
    """Per epoch, how many ideas contain a token fully matching any pattern (case-insensitive)."""
    out = []
    for ideas in ideas_by_epoch:
        texts = [i.idea_text if isinstance(i, Idea) else i for i in ideas]
        out.append(sum(matches_any(t, patterns) for t in texts))
    return out


def thinking_stratified_execution(epoch_trajs: Sequence[Trajectory], top_frac: float = 0.30) -> tuple[float, float]:
    """Completion rate of the longest- and shortest-thinking ``top_frac`` of an epoch."""
    n = len(epoch_trajs)
    if n < math.ceil(1 / top_frac):
        raise ValueError(f"need at least {math.ceil(1 / top_frac)} trajectories, got {n}")
    k = math.floor(top_frac * n)
    ranked = sorted(epoch_trajs, key=lambda t: (t.idea.thinking_len, t.idea.id))
    return completion_rate(ranked[-k:]), completion_rate(ranked[:k])


# --------------------------------------------------------------------------- reporting


def _perf_json(p: Performance) -> dict[str, Any]:
    return {"average": p.average, "best": p.best}


def build_report(
    trajs: Sequence[Trajectory],
    beta: float | None = None,
    loss_domain: bool = False,
    classes: Mapping[str, IdeaClass] | None = None,
    patterns: Sequence[str] = (),
) -> dict[str, Any]:
    from .search import epoch_best

    epochs = sorted({t.epoch for t in trajs})
    best_series = epoch_best(trajs)
    report: dict[str, Any] = {
        "n_ideas": len(trajs),
        "benchmark": {
            "completion_rate": completion_rate(trajs),
            "succeeded": _perf_json(avg_best_performance(trajs)),
            # failures count as 0 here, unlike "succeeded" above
            "mean_reward_all": (math.fsum(t.reward for t in trajs) / len(trajs)) if trajs else None,
        },
        "baseline": beta,
        "epoch_best": [{"epoch": e, "best": b} for e, b in best_series],
        # epochs counted from 1, with the initial batch as epoch 0 excluded
        "epoch_best_from_1": [{"epoch": e, "best": b} for e, b in best_series if e >= 1],
        "per_epoch": [],
    }
    if loss_domain:
        report["benchmark"]["succeeded_loss"] = _perf_json(avg_best_performance(trajs, loss_domain=True))
    if beta is not None:
        best = report["benchmark"]["succeeded"]["best"]
        report["table1"] = {"baseline": beta, "search_best": best, "improved": best is not None and best > beta}
    for e in epochs:
        group = [t for t in trajs if t.epoch == e]
        perf = avg_best_performance(group)
        row: dict[str, Any] = {
            "epoch": e,
            "n": len(group),
            "completion_rate": completion_rate(group),
            "average": perf.average,
            "best": perf.best,
            "sources": {s: sum(t.idea.source.value == s for t in group) for s in sorted({t.idea.source.value for t in group})},
        }
        if patterns:
            row["keyword_matches"] = keyword_convergence([[t.idea for t in group]], patterns)[0]
        report["per_epoch"].append(row)
    if classes is not None:
        report["stratified"] = [r.to_json() for r in stratified_table(trajs, classes, loss_domain)]
    return report


def render_markdown(report: Mapping[str, Any]) -> str:
    def fmt(v: Any) -> str:
        return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    b = report["benchmark"]
    lines = [
        "# Run report",
        "",
        f"Ideas executed: {report['n_ideas']}",
        "",
        "## Benchmark",
        "",
        "| completion rate | average (succeeded) | best (succeeded) |",
        "|---|---|---|",
        f"| {fmt(b['completion_rate'])} | {fmt(b['succeeded']['average'])} | {fmt(b['succeeded']['best'])} |",
        "",
    ]
    if "table1" in report:
        t = report["table1"]
        lines += ["## Baseline vs search", "", "| | reward |", "|---|---|",
                  f"| Baseline | {fmt(t['baseline'])} |", f"| Execution-guided search | {fmt(t['search_best'])} |", ""]
    if "stratified" in report:
        lines += ["## Idea types", "", "| class | percentage | average | best |", "|---|---|---|---|"]
        for r in report["stratified"]:
            lines.append(f"| {r['class']} | {r['percentage']:.1f}% | {fmt(r['average'])} | {fmt(r['best'])} |")
        lines.append("")
    if report["epoch_best"]:
        lines += ["## Best so far by epoch", "", "| epoch | best |", "|---|---|"]
        lines += [f"| {r['epoch']} | {fmt(r['best'])} |" for r in report["epoch_best"]]
        lines.append("")
    return "\n".join(lines)


def report(
    run_dir: str | os.PathLike,
    judge: Judge | None = None,
    patterns: Sequence[str] = (),
    trajectories_path: str | os.PathLike | None = None,
) -> dict[str, Any]:
    """Write ``report.json`` and ``report.md`` for a run directory and return the report."""
    run_dir = Path(run_dir)
    tpath = Path(trajectories_path) if trajectories_path else run_dir / "trajectories.jsonl"
    trajs: list[Trajectory] = []
    if tpath.exists():
        _, trajs = load_trajectories(tpath.read_text())
    beta = None
    loss_domain = False
    cfg_path = run_dir / "run_config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        beta = cfg.get("beta")
        loss_domain = cfg.get("env", {}).get("reward_kind") == "reciprocal_loss"
    classes = {t.idea.id: classify_idea(t.idea, judge) for t in trajs} if judge is not None else None
    rep = build_report(trajs, beta, loss_domain, classes, patterns)
    (run_dir / "report.json").write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
    (run_dir / "report.md").write_text(render_markdown(rep) + "\n")
    return rep
