import json

import pytest
from hypothesis import given, strategies as st

from execforge.analysis import (
    IdeaClass,
    JudgeUnavailable,
    ModelJudge,
    RuleJudge,
    ScriptedJudge,
    avg_best_performance,
    build_report,
    completion_rate,
    keyword_convergence,
    matches_any,
    render_markdown,
    report,
    stratified_table,
    thinking_stratified_execution,
)
from execforge.domain import ExecutionStatus, Idea, dump_trajectories
from execforge.gateway import ScriptedEndpoint

from conftest import make_traj

HP, ALG = IdeaClass.HYPER_PARAMETER, IdeaClass.ALGORITHMIC


def table_fixture():
    """40 ideas labelled to give a 5% / 95% split with known per-class average and best."""
    rewards = [0.398, 0.502] + [0.43] * 17 + [0.45] * 20 + [0.600]
    trajs = [make_traj(i, r) for i, r in enumerate(rewards)]
    classes = {t.idea.id: (HP if i < 2 else ALG) for i, t in enumerate(trajs)}
    return trajs, classes


def test_stratified_table_reproduces_reference_row():
    trajs, classes = table_fixture()
    hp, alg = stratified_table(trajs, classes)
    assert (hp.idea_class, alg.idea_class) == (HP, ALG)
    assert hp.percentage == pytest.approx(5.0) and alg.percentage == pytest.approx(95.0)
    assert hp.performance.average == pytest.approx(0.450) and hp.performance.best == pytest.approx(0.502)
    assert alg.performance.average == pytest.approx(0.445) and alg.performance.best == pytest.approx(0.600)


def test_stratified_table_edge_cases():
    trajs = [make_traj(0, 0.5), make_traj(1, 0.6)]
    hp, alg = stratified_table(trajs, [HP, HP])
    assert alg.percentage == 0 and alg.performance.empty
    hp, alg = stratified_table(trajs, [HP, ALG])
    assert hp.percentage == alg.percentage == 50
    with pytest.raises(ValueError):
        stratified_table(trajs, {"t0-0": HP})


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_stratified_percentages_sum_to_100(rows):
    trajs = [make_traj(i, r, status=ExecutionStatus.SUCCEEDED if ok else ExecutionStatus.RUN_FAILED)
             for i, (r, ok, _) in enumerate(rows)]
    table = stratified_table(trajs, [HP if hp else ALG for _, _, hp in rows])
    assert sum(r.percentage for r in table) == pytest.approx(100.0, abs=0.1)


def test_performance_uses_successes_only_and_loss_domain():
    trajs = [make_traj(0, 1 / 3.313), make_traj(1, 1 / 3.195), make_traj(2, 0, status=ExecutionStatus.TIMED_OUT)]
    assert completion_rate(trajs) == pytest.approx(2 / 3)
    loss = avg_best_performance(trajs, loss_domain=True)
    assert loss.average == pytest.approx(3.254) and loss.best == pytest.approx(3.195)
    assert avg_best_performance([trajs[2]]).empty
    assert completion_rate([]) == 0.0


def test_judges():
    assert RuleJudge().classify(Idea("a", "set x=(1,2,3,4)")) is HP
    assert RuleJudge().classify(Idea("a", "add a gating layer")) is ALG
    sj = ScriptedJudge({"a": "algorithmic", "tune lr": "hyper_parameter"})
    assert sj.classify(Idea("a", "whatever")) is ALG
    assert sj.classify(Idea("b", "tune lr")) is HP
    with pytest.raises(JudgeUnavailable):
        sj.classify(Idea("c", "unknown"))
    mj = ModelJudge(ScriptedEndpoint({"*": ["Algorithmic."]}))
    assert mj.classify(Idea("a", "x")) is ALG
    with pytest.raises(JudgeUnavailable):
        ModelJudge(ScriptedEndpoint({"*": ["maybe"]})).classify(Idea("a", "x"))


def test_keyword_convergence_is_token_exact():
    patterns = ["layernorm", "ema"]
    assert matches_any("Replace RMSNorm with LayerNorm.", patterns)
    assert not matches_any("schema change", patterns)
    epochs = [["use ema weights", "bigger model"], ["LayerNorm", "EMA", "gating"]]
    assert keyword_convergence(epochs, patterns) == [1, 2]


def test_thinking_stratification_counts_floor_of_share():
    trajs = [make_traj(i, 0.5, thinking=" ".join(["t"] * (10 + i))) for i in range(7)]
    trajs += [make_traj(i, 0, status=ExecutionStatus.RUN_FAILED, thinking=" ".join(["t"] * (100 + i))) for i in range(7, 10)]
    top, bottom = thinking_stratified_execution(trajs, 0.30)
    assert (top, bottom) == (0.0, 1.0)
    with pytest.raises(ValueError):
        thinking_stratified_execution(trajs[:3], 0.30)


def test_report_files_are_deterministic(tmp_path):
    trajs, _ = table_fixture()
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        (tmp_path / d / "trajectories.jsonl").write_text(dump_trajectories(trajs, "r"))
        (tmp_path / d / "run_config.json").write_text(json.dumps({"beta": 0.48, "env": {"reward_kind": "accuracy"}}))
        report(tmp_path / d, RuleJudge(), ["layernorm"])
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["table1"] == {"baseline": 0.48, "search_best": 0.6, "improved": True}
    assert "| Execution-guided search | 0.6000 |" in (tmp_path / "a" / "report.md").read_text()


def test_report_epoch_conventions():
    trajs = [make_traj(0, 0.3, 0), make_traj(1, 0.5, 1), make_traj(2, 0.4, 2)]
    rep = build_report(trajs)
    assert [r["best"] for r in rep["epoch_best"]] == [0.3, 0.5, 0.5]
    assert [r["epoch"] for r in rep["epoch_best_from_1"]] == [1, 2]
    assert "Best so far" in render_markdown(rep)
