"""Tabular RL from execution reward on the TwoMode idea space.

The ideator is a categorical policy over the ten TwoMode ideas. Each epoch
samples one group of rollouts, scores them by executing the ideas, normalizes
rewards within the group, and takes one clipped policy-gradient step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .analysis import keyword_convergence, thinking_stratified_execution
from .domain import ExecutionStatus, Idea, IdeaSource, Reward, Trajectory
from .environments import TwoModeSpec, evaluate, synth_execute, twomode_environment
from .mocks import thinking_trace

EASY_PATTERNS = ("layernorm", "ema")
SHAPING_KINDS = ("none", "length", "diversity_penalty", "dynamic_prompt")
LENGTH_NORMALIZER = 400


@dataclass(frozen=True)
class Shaping:
    kind: str = "none"
    weight: float = 0.0
    cap: float = 0.3
    normalizer: float = LENGTH_NORMALIZER
    # dynamic_prompt: how many previous-epoch rollouts go into the context, and their logit pull
    context_size: int = 8
    context_strength: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in SHAPING_KINDS:
            raise ValueError(f"unknown shaping {self.kind!r}; expected one of {SHAPING_KINDS}")


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 128
    epochs: int = 68
    learning_rate: float = 1.0
    cliprange: float = 0.2
    advantage_eps: float = 1e-6
    normalize_by_std: bool = True
    std_ddof: int = 1
    shaping: Shaping = field(default_factory=Shaping)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.cliprange <= 0 or self.advantage_eps <= 0:
            raise ValueError("cliprange and advantage_eps must be positive")
        if isinstance(self.shaping, Mapping):
            object.__setattr__(self, "shaping", Shaping(**self.shaping))

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "RLConfig":
        if "seed" not in d:
            raise ValueError("rl config needs an explicit seed")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown rl config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class PolicyState:
    logits: np.ndarray
    context_key: tuple[float, ...] | None = None
    step: int = 0

    @classmethod
    def uniform(cls, n: int) -> "PolicyState":
        return cls(np.zeros(n))

    def effective_logits(self) -> np.ndarray:
        if self.context_key is None:
            return self.logits
        return self.logits + np.asarray(self.context_key)

    def probs(self) -> np.ndarray:
        z = self.effective_logits()
        e = np.exp(z - z.max())
        return e / e.sum()


@dataclass(frozen=True)
class EpochDynamics:
    epoch: int
    avg_reward: float
    max_reward: float
    avg_shaped_reward: float
    avg_thinking_len: float
    avg_idea_len: float
    execution_rate_top30_thinking: float
    execution_rate_bottom30_thinking: float
    converged_idea_count: int
    expected_reward: float
    easy_mass: float

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


# --------------------------------------------------------------------------- pieces


def rollout_group(policy: PolicyState, G: int, seed: Any, spec: TwoModeSpec | None = None, epoch: int = 0) -> list[Idea]:
    """Draw ``G`` independent ideas from the policy; deterministic given ``seed``."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    spec = spec or TwoModeSpec()
    ideas = spec.ideas
    picks = np.random.default_rng(seed).choice(len(ideas), size=G, p=policy.probs())
    traces = {i.name: thinking_trace(i.thinking_len) for i in ideas}
    return [
        Idea(f"r{epoch}-{k:04d}", ideas[a].text, traces[ideas[a].name], IdeaSource.RL_ROLLOUT)
        for k, a in enumerate(picks)
    ]


def group_normalized_advantages(
    rewards: Sequence[float], eps: float = 1e-6, normalize_by_std: bool = True, ddof: int = 1
) -> np.ndarray:
    """Centre rewards on the group mean; optionally divide by (std + eps)."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group size must be >= 2")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    adv = r - r.mean()
    if normalize_by_std:
        adv = adv / (r.std(ddof=ddof) + eps)
    return adv


def _actions(rollouts: Sequence[Idea | int], spec: TwoModeSpec) -> np.ndarray:
    names = spec.names
    out = []
    for r in rollouts:
        if isinstance(r, (int, np.integer)):
            out.append(int(r))
        else:
            idea = spec.parse(r.idea_text)
            if idea is None:
                raise ValueError(f"rollout {r.id} is not a TwoMode idea")
            out.append(names.index(idea.name))
    return np.array(out, dtype=int)


def surrogate_gradient(
    policy: PolicyState, actions: np.ndarray, advantages: np.ndarray, old_policy: PolicyState, cliprange: float
) -> np.ndarray:
    """Gradient w.r.t. logits of mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)."""
    p = policy.probs()
    p_old = old_policy.probs()
    grad = np.zeros_like(p)
    for a, adv in zip(actions, advantages):
        rho = p[a] / p_old[a]
        # the clipped branch is flat, so it contributes nothing once it is the minimum
        if (adv > 0 and rho > 1 + cliprange) or (adv < 0 and rho < 1 - cliprange):
            continue
        g = -p * rho
        g[a] += rho
        grad += adv * g
    return grad / len(actions)


def policy_update(
    policy: PolicyState,
    rollouts: Sequence[Idea | int],
    advantages: Sequence[float],
    old_policy: PolicyState,
    cfg: RLConfig,
    spec: TwoModeSpec | None = None,
) -> PolicyState:
    """One gradient-ascent step on the clipped surrogate."""
    spec = spec or TwoModeSpec()
    actions = _actions(rollouts, spec)
    adv = np.asarray(advantages, dtype=float)
    if len(actions) != len(adv):
        raise ValueError("rollouts and advantages are not aligned")
    if not adv.any():
        return replace(policy, step=policy.step + 1)
    grad = surrogate_gradient(policy, actions, adv, old_policy, cfg.cliprange)
    return replace(policy, logits=policy.logits + cfg.learning_rate * grad, step=policy.step + 1)


def execution_reward(idea: Idea | str, spec: TwoModeSpec | None = None, seed: Any = 0) -> Reward:
    env = twomode_environment(spec)
    text = idea.idea_text if isinstance(idea, Idea) else idea
    res = synth_execute(env, text, seed)
    return evaluate(env, res.metrics, res.status)


def jaccard(a: str | Iterable[str], b: str | Iterable[str]) -> float:
    """Jaccard similarity of whitespace token sets; two empty sets count as identical."""
    sa = set(a.split()) if isinstance(a, str) else set(a)
    sb = set(b.split()) if isinstance(b, str) else set(b)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def shaped_reward(base: float, idea: Idea, prev_epoch_ideas: Sequence[Idea | str], cfg: RLConfig | Shaping) -> float:
    s = cfg.shaping if isinstance(cfg, RLConfig) else cfg
    if s.kind == "length":
        tokens = idea.thinking_len + idea.idea_len
        return base + s.weight * min(s.cap, tokens / s.normalizer)
    if s.kind == "diversity_penalty":
        if not prev_epoch_ideas:
            return base
        sim = max(jaccard(idea.idea_text, p.idea_text if isinstance(p, Idea) else p) for p in prev_epoch_ideas)
        return base - s.weight * sim
    return base


def expected_reward(policy: PolicyState, spec: TwoModeSpec | None = None) -> float:
    """Exact expected execution reward of the policy (ignores any context shift)."""
    spec = spec or TwoModeSpec()
    return float(PolicyState(policy.logits).probs() @ spec.expected_rewards())


def expected_gradient(policy: PolicyState, spec: TwoModeSpec | None = None) -> np.ndarray:
    """Exact gradient of expected reward w.r.t. logits: p * (m - p.m)."""
    spec = spec or TwoModeSpec()
    p = PolicyState(policy.logits).probs()
    m = spec.expected_rewards()
    return p * (m - p @ m)


def _dynamic_context(prev: Sequence[Idea], spec: TwoModeSpec, s: Shaping, rng: np.random.Generator) -> tuple[float, ...]:
    names = spec.names
    k = min(s.context_size, len(prev))
    picks = rng.choice(len(prev), size=k, replace=False)
    counts = np.zeros(len(names))
    for i in picks:
        idea = spec.parse(prev[i].idea_text)
        counts[names.index(idea.name)] += 1
    return tuple(float(v) for v in s.context_strength * np.log1p(counts))


# --------------------------------------------------------------------------- loop


@dataclass
class RLRun:
    dynamics: list[EpochDynamics]
    policies: list[PolicyState]
    rollouts: list[list[Trajectory]]


def train_rl(cfg: RLConfig, spec: TwoModeSpec | None = None, keep_rollouts: bool = False) -> RLRun:
    spec = spec or TwoModeSpec()
    env = twomode_environment(spec)
    policy = PolicyState.uniform(len(spec.ideas))
    policies = [policy]
    dynamics: list[EpochDynamics] = []
    kept: list[list[Trajectory]] = []
    prev: list[Idea] = []
    for epoch in range(cfg.epochs):
        ctx_rng = np.random.default_rng([cfg.seed, epoch, 1])
        if cfg.shaping.kind == "dynamic_prompt" and prev:
            policy = replace(policy, context_key=_dynamic_context(prev, spec, cfg.shaping, ctx_rng))
        else:
            policy = replace(policy, context_key=None)
        old = policy
        ideas = rollout_group(policy, cfg.group_size, [cfg.seed, epoch, 0], spec, epoch)
        trajs = []
        for k, idea in enumerate(ideas):
            res = synth_execute(env, idea.idea_text, [cfg.seed, epoch, 2, k])
            r = evaluate(env, res.metrics, res.status).value
            trajs.append(Trajectory(idea, epoch, res.status, r, res.metrics, res.execution_log))
        base = np.array([t.reward for t in trajs])
        shaped = np.array([shaped_reward(b, i, prev, cfg) for b, i in zip(base, ideas)])
        adv = group_normalized_advantages(shaped, cfg.advantage_eps, cfg.normalize_by_std, cfg.std_ddof)
        top, bottom = thinking_stratified_execution(trajs, 0.30)
        dynamics.append(
            EpochDynamics(
                epoch=epoch,
                avg_reward=float(base.mean()),
                max_reward=float(base.max()),
                avg_shaped_reward=float(shaped.mean()),
                avg_thinking_len=float(np.mean([i.thinking_len for i in ideas])),
                avg_idea_len=float(np.mean([i.idea_len for i in ideas])),
                execution_rate_top30_thinking=top,
                execution_rate_bottom30_thinking=bottom,
                converged_idea_count=keyword_convergence([ideas], EASY_PATTERNS)[0],
                expected_reward=expected_reward(policy, spec),
                easy_mass=float(PolicyState(policy.logits).probs()[[not i.complex for i in spec.ideas]].sum()),
            )
        )
        policy = policy_update(policy, ideas, adv, old, cfg, spec)
        policies.append(replace(policy, context_key=None))
        if keep_rollouts:
            kept.append(trajs)
        prev = ideas
    return RLRun(dynamics, policies, kept)
