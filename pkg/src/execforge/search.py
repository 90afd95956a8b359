"""Execution-guided evolutionary search and the best-of-N comparator."""

from __future__ import annotations

import itertools
import json
import math
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .domain import ExecutionStatus, Idea, IdeaSource, MetricsLog, Trajectory
from .environments import Environment, evaluate, synth_execute
from .gateway import MemoryStore, MetricsSink, ModelEndpoint, ModelRequest, artifact_key
from .implementer import AllCandidatesFailed, ImplementerConfig, implement_idea
from .mocks import TASK_EXPLOIT, TASK_EXPLORE, TASK_SAMPLE
from .scheduler import Scheduler, WorkerSlot
from .worker import ExecutionResult, execute

logger = logging.getLogger(__name__)


class EmptyPositiveSet(Exception):
    """No trajectory beats the baseline, so there is nothing to exploit."""


# --------------------------------------------------------------------------- configuration


def linear_schedule(a1: float = 50.0, step: float = 5.0, cap: float = 90.0) -> Callable[[int], float]:
    return lambda t: min(cap, a1 + step * (t - 1))


def constant_schedule(a1: float) -> Callable[[int], float]:
    return lambda t: a1


@dataclass
class SearchConfig:
    N: int
    T: int
    a1: float = 50.0
    schedule: dict[str, Any] = field(default_factory=lambda: {"kind": "linear", "params": {"step": 5.0, "cap": 90.0}})
    context_budget_chars: int = 4000
    seed: int = 0
    beta: float | None = None
    max_concurrency: int = 8

    def __post_init__(self) -> None:
        if self.N < 0 or self.T < 0:
            raise ValueError("N and T must be non-negative")
        if self.context_budget_chars <= 0:
            raise ValueError("context_budget_chars must be positive")
        rates = [self.rate(t) for t in range(1, self.T + 1)]
        if any(not 0 <= a <= 100 for a in rates):
            raise ValueError(f"exploitation rates out of [0, 100]: {rates}")
        if any(b < a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"exploitation rate must not decrease over epochs: {rates}")

    def schedule_fn(self) -> Callable[[int], float]:
        kind = self.schedule.get("kind", "linear")
        params = self.schedule.get("params", {})
        if kind == "linear":
            return linear_schedule(self.a1, float(params.get("step", 5.0)), float(params.get("cap", 90.0)))
        if kind == "constant":
            return constant_schedule(self.a1)
        if kind == "table":
            table = [float(v) for v in params["rates"]]
            return lambda t: table[min(t, len(table)) - 1]
        raise ValueError(f"unknown schedule kind {kind!r}")

    def rate(self, t: int) -> float:
        return self.schedule_fn()(t)

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SearchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"ideator", "executor", "coder", "implementer", "run_id"}
        if unknown:
            raise ValueError(f"unknown search config fields: {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("search config needs an explicit seed")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


# --------------------------------------------------------------------------- algorithm steps


def split_budget(a: float, N: int) -> tuple[int, int]:
    """Exploit/explore split for exploitation rate ``a`` (percent) and batch ``N``."""
    if not 0 <= a <= 100:
        raise ValueError(f"rate {a} outside [0, 100]")
    # exact rational floor; float a*N/100 can land just under an integer
    n_exp = math.floor(Fraction(a) * N / 100)
    return n_exp, N - n_exp


def select_positive(trajs: Sequence[Trajectory], beta: float) -> list[Trajectory]:
    return [t for t in trajs if t.reward > beta]


def _exploit_order(t: Trajectory) -> tuple:
    return (-t.reward, t.epoch, t.idea.id)


def _exploit_entry(t: Trajectory) -> str:
    return f"- [reward {t.reward:.6f}] {t.idea.idea_text}\n"


def _explore_entry(t: Trajectory) -> str:
    return f"- {t.idea.idea_text}\n"


def greedy_prefix(items: Sequence[Trajectory], budget: int, entry: Callable[[Trajectory], str]) -> list[Trajectory]:
    """Longest prefix whose rendered entries fit in ``budget`` characters."""
    out, used = [], 0
    for t in items:
        size = len(entry(t))
        if used + size > budget:
            break
        out.append(t)
        used += size
    return out


@dataclass(frozen=True)
class Prompt:
    mode: str
    request: ModelRequest | None
    included: tuple[Trajectory, ...] = ()


def sample_prompt(n: int, task: str = "") -> ModelRequest:
    text = (
        f"{TASK_SAMPLE}\nPropose one new research idea that improves the baseline.\n"
        + (f"\n## Environment\n{task}\n" if task else "")
    )
    return ModelRequest(text, n)


def exploit_prompt(positives: Sequence[Trajectory], n: int, budget_chars: int, task: str = "") -> Prompt:
    """Build the variant-generation prompt from the best positives that fit the budget."""
    if not positives:
        raise EmptyPositiveSet()
    ranked = sorted(positives, key=_exploit_order)
    included = greedy_prefix(ranked, budget_chars, _exploit_entry)
    body = "".join(_exploit_entry(t) for t in included)
    text = (
        f"{TASK_EXPLOIT}\nThese ideas beat the baseline. Propose a new variant that combines their strengths.\n"
        + (f"\n## Environment\n{task}\n" if task else "")
        + f"\n## Parents\n{body}"
    )
    return Prompt("exploit", ModelRequest(text, n) if n > 0 else None, tuple(included))


def subsample_to_context(trajs: Sequence[Trajectory], budget_chars: int, seed: Any) -> list[Trajectory]:
    """Uniform sampling without replacement until the next pick would overflow the budget."""
    if budget_chars <= 0:
        raise ValueError("budget must be positive")
    order = np.random.default_rng(seed).permutation(len(trajs))
    return greedy_prefix([trajs[i] for i in order], budget_chars, _explore_entry)


def explore_prompt(subset: Sequence[Trajectory], n: int, task: str = "") -> Prompt:
    if n <= 0:
        return Prompt("explore", None, tuple(subset))
    body = "".join(_explore_entry(t) for t in subset)
    text = (
        f"{TASK_EXPLORE}\nPropose a completely new idea that is different from all of the ideas below.\n"
        + (f"\n## Environment\n{task}\n" if task else "")
        + f"\n## Previous ideas\n{body}"
    )
    return Prompt("explore", ModelRequest(text, n), tuple(subset))


def epoch_best(trajs: Sequence[Trajectory]) -> list[tuple[int, float]]:
    """Running maximum of reward, one point per epoch present in ``trajs``."""
    by_epoch: dict[int, float] = {}
    for t in trajs:
        by_epoch[t.epoch] = max(by_epoch.get(t.epoch, 0.0), t.reward)
    out, best = [], -np.inf
    for e in sorted(by_epoch):
        best = max(best, by_epoch[e])
        out.append((e, float(best)))
    return out


# --------------------------------------------------------------------------- execution backends


class LogicalClock:
    """Monotone tick counter used in place of wall-clock timestamps."""

    def __init__(self) -> None:
        self._it = itertools.count()
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            return next(self._it)


class Executor(Protocol):
    def execute_batch(self, ideas: Sequence[Idea], epoch: int) -> list[Trajectory]: ...


def _trajectory(idea: Idea, epoch: int, env: Environment, res: ExecutionResult, stamps: dict[str, int], **extra) -> Trajectory:
    reward = evaluate(env, res.metrics, res.status).value
    return Trajectory(
        idea=idea,
        epoch=epoch,
        status=res.status,
        reward=reward,
        metrics=res.metrics,
        execution_log=res.execution_log,
        timestamps=stamps,
        **extra,
    )


class SyntheticExecutor:
    """Executes ideas directly against a synthetic environment's analytic reward."""

    def __init__(self, env: Environment, seed: int = 0, clock: LogicalClock | None = None):
        if env.synthetic is None:
            raise ValueError(f"{env.env_id} has no synthetic definition")
        self.env = env
        self.seed = seed
        self.clock = clock or LogicalClock()

    def execute_batch(self, ideas: Sequence[Idea], epoch: int) -> list[Trajectory]:
        out = []
        for j, idea in enumerate(ideas):
            submitted = self.clock()
            res = synth_execute(self.env, idea.idea_text, seed=[self.seed, epoch, j])
            out.append(_trajectory(idea, epoch, self.env, res, {"submitted": submitted, "finished": self.clock()}))
        return out


class PipelineExecutor:
    """Implementer, scheduler and worker wired together in-process."""

    def __init__(
        self,
        env: Environment,
        coder: ModelEndpoint,
        run_id: str,
        store=None,
        sink: MetricsSink | None = None,
        impl_cfg: ImplementerConfig | None = None,
        workers: int = 4,
        worker_capacity=None,
        work_root: str | None = None,
        max_concurrency: int = 8,
        clock: LogicalClock | None = None,
        state_path: str | None = None,
    ):
        self.env = env
        self.coder = coder
        self.run_id = run_id
        self.store = store if store is not None else MemoryStore()
        self.sink = sink or MetricsSink()
        self.impl_cfg = impl_cfg or ImplementerConfig()
        self.baseline = env.baseline_tree()
        self.max_concurrency = max_concurrency
        self.clock = clock or LogicalClock()
        capacity = worker_capacity or env.resource_requirement
        slots = [WorkerSlot(i, capacity) for i in range(workers)]
        self.results: dict[str, ExecutionResult] = {}
        self.scheduler = Scheduler(
            self.store,
            env,
            lambda job: execute(job, self.store, env, work_root=work_root, clock=self.clock),
            slots,
            sink=self.sink,
            state_path=state_path,
            tick_s=0.0,
            on_result=lambda r: self.results.__setitem__(r.job.codebase_digest, r),
        )

    def _implement(self, idea: Idea, epoch: int, j: int):
        key = artifact_key(self.run_id, epoch, j)
        try:
            return implement_idea(idea, self.baseline, self.env, self.impl_cfg, self.coder, self.store, key)
        except AllCandidatesFailed as exc:
            return exc

    def execute_batch(self, ideas: Sequence[Idea], epoch: int) -> list[Trajectory]:
        submitted = [self.clock() for _ in ideas]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            impls = list(pool.map(lambda p: self._implement(p[1], epoch, p[0]), enumerate(ideas)))
        self.scheduler.run_until_drained()
        out = []
        for idea, impl, sub in zip(ideas, impls, submitted):
            if isinstance(impl, AllCandidatesFailed):
                status = ExecutionStatus.GUARD_VIOLATION if impl.guard_violation else ExecutionStatus.PATCH_FAILED
                log = "\n".join(f"candidate #{i}: {msg}" for i, msg in sorted(impl.logs.items()))
                res = ExecutionResult(None, status, MetricsLog(), log, {})
                out.append(_trajectory(idea, epoch, self.env, res, {"submitted": sub, "finished": self.clock()}))
                continue
            res = self.results.get(impl.digest)
            if res is None:
                res = ExecutionResult(None, ExecutionStatus.RUN_FAILED, MetricsLog(), "job never completed", {})
            out.append(
                _trajectory(
                    idea, epoch, self.env, res, {"submitted": sub, "finished": self.clock()},
                    diff=impl.diff, codebase_key=impl.key,
                )
            )
        return out

    def close(self) -> None:
        self.scheduler.shutdown()


# --------------------------------------------------------------------------- drivers


@dataclass
class EpochRecord:
    epoch: int
    rate: float | None
    n_exploit: int
    n_explore: int
    n_positive: int
    reassigned: bool = False


@dataclass
class SearchResult:
    trajectories: list[Trajectory]
    epochs: list[EpochRecord]
    prompts: list[Prompt]
    beta: float


def ideas_from(endpoint: ModelEndpoint, req: ModelRequest | None, epoch: int, start: int, source: IdeaSource,
               parents: Sequence[str] = (), prefix: str = "t") -> list[Idea]:
    if req is None:
        return []
    comps = endpoint.generate(req)
    return [
        Idea(f"{prefix}{epoch}-{start + j}", c.body_text.strip(), c.thinking_text, source, tuple(parents))
        for j, c in enumerate(comps)
    ]


def run_search(
    cfg: SearchConfig,
    ideator: ModelEndpoint,
    executor: Executor,
    env: Environment,
    task: str = "",
    on_epoch: Callable[[int, list[Trajectory]], None] | None = None,
) -> SearchResult:
    """Run epochs 0..T; returns every trajectory with its epoch provenance."""
    beta = cfg.beta if cfg.beta is not None else env.beta
    prompts: list[Prompt] = []
    epochs: list[EpochRecord] = []
    p0 = Prompt("sample", sample_prompt(cfg.N, task)) if cfg.N else Prompt("sample", None)
    prompts.append(p0)
    ideas = ideas_from(ideator, p0.request, 0, 0, IdeaSource.SAMPLED)
    history = executor.execute_batch(ideas, 0)
    epochs.append(EpochRecord(0, None, 0, len(ideas), 0))
    if on_epoch:
        on_epoch(0, history)
    for t in range(1, cfg.T + 1):
        a = cfg.rate(t)
        positives = select_positive(history, beta)
        n_exp, n_expl = split_budget(a, cfg.N)
        reassigned = False
        batch: list[Idea] = []
        if n_exp and positives:
            pe = exploit_prompt(positives, n_exp, cfg.context_budget_chars, task)
            prompts.append(pe)
            batch += ideas_from(ideator, pe.request, t, 0, IdeaSource.EXPLOIT, [p.idea.id for p in pe.included])
        elif n_exp:
            n_expl, n_exp, reassigned = cfg.N, 0, True
        subset = subsample_to_context(history, cfg.context_budget_chars, [cfg.seed, t])
        px = explore_prompt(subset, n_expl, task)
        prompts.append(px)
        batch += ideas_from(ideator, px.request, t, len(batch), IdeaSource.EXPLORE)
        new = executor.execute_batch(batch, t)
        epochs.append(EpochRecord(t, a, n_exp, n_expl, len(positives), reassigned))
        history = history + new
        if on_epoch:
            on_epoch(t, new)
    return SearchResult(history, epochs, prompts, beta)


def best_of_n(ideator: ModelEndpoint, executor: Executor | Environment, N: int, seed: int = 0, task: str = "") -> list[Trajectory]:
    """N independent fresh samples, executed with no feedback between them.

    A synthetic :class:`Environment` may be passed in place of an executor; it is
    run through :class:`SyntheticExecutor` seeded with ``seed``.
    """
    if isinstance(executor, Environment):
        executor = SyntheticExecutor(executor, seed)
    if N <= 0:
        return []
    ideas = ideas_from(ideator, sample_prompt(N, task), 0, 0, IdeaSource.SAMPLED, prefix="bon")
    return executor.execute_batch(ideas, 0)


def search_summary(result: SearchResult) -> dict[str, Any]:
    return {
        "beta": result.beta,
        "epochs": [asdict(e) for e in result.epochs],
        "epoch_best": epoch_best(result.trajectories),
        "n_trajectories": len(result.trajectories),
    }


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)
