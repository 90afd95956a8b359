import math
import re
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from execforge.domain import ExecutionStatus, IdeaSource
from execforge.environments import lattice_environment
from execforge.gateway import FunctionEndpoint
from execforge.mocks import TASK_EXPLOIT, LatticeCoder, MutationIdeator
from execforge.search import (
    EmptyPositiveSet,
    PipelineExecutor,
    SearchConfig,
    SyntheticExecutor,
    best_of_n,
    epoch_best,
    exploit_prompt,
    linear_schedule,
    run_search,
    select_positive,
    split_budget,
    subsample_to_context,
)

from conftest import make_traj


def test_default_schedule():
    a = linear_schedule()
    assert [a(t) for t in (1, 2, 5, 9, 10, 30)] == [50, 55, 70, 90, 90, 90]


@given(st.integers(0, 100), st.integers(0, 500))
def test_split_budget_integer_rates(a, N):
    assert split_budget(a, N) == (a * N // 100, N - a * N // 100)


@given(st.floats(0, 100, allow_nan=False), st.integers(0, 500))
def test_split_budget_real_rates(a, N):
    n_exp, n_expl = split_budget(a, N)
    assert n_exp == math.floor(Fraction(a) * N / 100)
    assert n_exp + n_expl == N and n_exp >= 0 and n_expl >= 0


def test_split_budget_float_edge():
    # 0.29 * 100 is 28.999999999999996 in floating point, the split must still be exact
    assert split_budget(29, 100) == (29, 71)
    with pytest.raises(ValueError):
        split_budget(101, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(10, 3, schedule={"kind": "table", "params": {"rates": [80, 60, 70]}})
    with pytest.raises(ValueError):
        SearchConfig.from_json({"N": 10, "T": 3})
    with pytest.raises(ValueError):
        SearchConfig.from_json({"N": 10, "T": 3, "seed": 0, "bogus": 1})
    assert SearchConfig.from_json({"N": 10, "T": 3, "seed": 0}).rate(2) == 55


rewards = st.lists(st.floats(0, 1, allow_nan=False), max_size=30)


@given(rewards, st.floats(0, 1, allow_nan=False))
def test_select_positive_is_strict(rs, beta):
    trajs = [make_traj(i, r) for i, r in enumerate(rs)]
    chosen = select_positive(trajs, beta)
    assert [t.idea.id for t in chosen] == [t.idea.id for t in trajs if t.reward > beta]


@given(st.lists(st.floats(0.31, 1, allow_nan=False), min_size=1, max_size=30), st.integers(1, 400))
def test_exploit_prompt_is_best_first_prefix(rs, budget):
    trajs = [make_traj(i, r) for i, r in enumerate(rs)]
    p = exploit_prompt(trajs, 3, budget)
    ranked = sorted(trajs, key=lambda t: (-t.reward, t.epoch, t.idea.id))
    assert list(p.included) == ranked[: len(p.included)]
    assert all(t.idea.idea_text in p.request.prompt for t in p.included)


def test_exploit_prompt_without_positives():
    with pytest.raises(EmptyPositiveSet):
        exploit_prompt([], 3, 100)


@given(st.integers(1, 40), st.integers(1, 500), st.integers(0, 100))
def test_subsample_fits_budget(n, budget, seed):
    trajs = [make_traj(i, 0.1) for i in range(n)]
    sub = subsample_to_context(trajs, budget, seed)
    assert sum(len(f"- {t.idea.idea_text}\n") for t in sub) <= budget
    assert len({t.idea.id for t in sub}) == len(sub)
    assert sub == subsample_to_context(trajs, budget, seed)


def test_epoch_best_is_running_max():
    trajs = [make_traj(0, 0.5, 0), make_traj(1, 0.3, 1), make_traj(2, 0.7, 2), make_traj(3, 0.0, 3, ExecutionStatus.RUN_FAILED)]
    assert epoch_best(trajs) == [(0, 0.5), (1, 0.5), (2, 0.7), (3, 0.7)]


def lattice_run(seed, N=10, T=5, budget=400, **kw):
    env = lattice_environment()
    cfg = SearchConfig(N, T, context_budget_chars=budget, seed=seed, **kw)
    return run_search(cfg, MutationIdeator(seed=seed), SyntheticExecutor(env, seed), env)


def test_search_provenance_and_budget():
    res = lattice_run(3)
    by_epoch = {}
    for t in res.trajectories:
        by_epoch.setdefault(t.epoch, []).append(t)
    assert sorted(by_epoch) == list(range(6)) and all(len(v) == 10 for v in by_epoch.values())
    assert all(t.idea.source is IdeaSource.SAMPLED for t in by_epoch[0])
    ids = {t.idea.id for t in res.trajectories}
    for rec in res.epochs[1:]:
        got = by_epoch[rec.epoch]
        assert sum(t.idea.source is IdeaSource.EXPLOIT for t in got) == rec.n_exploit
        for t in got:
            if t.idea.source is IdeaSource.EXPLOIT:
                assert set(t.idea.parent_ids) <= ids
    steps = [v for v, _ in epoch_best(res.trajectories)]
    assert steps == list(range(6))
    bests = [b for _, b in epoch_best(res.trajectories)]
    assert bests == sorted(bests)


def test_no_positives_reassigns_budget_to_exploration():
    res = lattice_run(0, beta=10.0)
    assert all(r.reassigned and r.n_exploit == 0 for r in res.epochs[1:])
    assert not any(t.idea.source is IdeaSource.EXPLOIT for t in res.trajectories)


def test_full_exploitation_has_no_explore_ideas():
    res = lattice_run(1, a1=100, schedule={"kind": "constant", "params": {}})
    assert not any(t.idea.source is IdeaSource.EXPLORE for t in res.trajectories if t.epoch >= 1)


def test_exploit_prompts_only_hold_positives():
    res = lattice_run(5, N=12, T=6)
    for p in res.prompts:
        if p.mode != "exploit":
            continue
        assert p.request.prompt.startswith(TASK_EXPLOIT)
        for value in re.findall(r"\[reward ([0-9.]+)\]", p.request.prompt):
            assert float(value) > res.beta
        assert all(t.reward > res.beta for t in p.included)


def test_search_is_deterministic():
    a, b = lattice_run(11), lattice_run(11)
    assert [(t.idea.idea_text, t.reward) for t in a.trajectories] == [(t.idea.idea_text, t.reward) for t in b.trajectories]


def test_best_of_n_runs_independent_samples():
    env = lattice_environment()
    trajs = best_of_n(MutationIdeator(seed=2), env, 30, seed=2)
    assert len(trajs) == 30 and {t.idea.source for t in trajs} == {IdeaSource.SAMPLED}
    assert best_of_n(MutationIdeator(), env, 0) == []


def test_pipeline_executor_runs_real_code(tmp_path):
    env = lattice_environment(process=True)
    cfg = SearchConfig(4, 1, context_budget_chars=400, seed=1)
    ex = PipelineExecutor(env, LatticeCoder(seed=1, break_rate=0.3), "r", workers=2, work_root=str(tmp_path))
    try:
        res = run_search(cfg, MutationIdeator(seed=1), ex, env)
    finally:
        ex.close()
    spec = env.synthetic
    for t in res.trajectories:
        if t.succeeded:
            assert t.reward == pytest.approx(spec.reward(spec.parse(t.idea.idea_text)))
            assert t.codebase_key.startswith("runs/r/epoch")
