import json
import math

import pytest
from hypothesis import given, strategies as st

from execforge.domain import (
    TRAJECTORY_FIELDS,
    ExecutionStatus,
    Idea,
    IdeaSource,
    MetricsLog,
    NoAccuracyRecords,
    NonFiniteLoss,
    Reward,
    RewardKind,
    Trajectory,
    count_tokens,
    dump_trajectories,
    load_trajectories,
    reward_from_accuracy,
    reward_from_loss,
)

from conftest import make_traj


def test_reward_from_loss_known_values():
    assert reward_from_loss(3.255).value == pytest.approx(0.30722, abs=1e-5)
    assert reward_from_loss(4.066).value == pytest.approx(0.24594, abs=1e-5)
    assert reward_from_loss(5.150).value == pytest.approx(1 / 5.15)
    assert reward_from_loss(2.0).kind is RewardKind.RECIPROCAL_LOSS


@pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
def test_reward_from_loss_rejects_degenerate_losses(bad):
    with pytest.raises(NonFiniteLoss):
        reward_from_loss(bad)


@given(st.floats(min_value=1e-3, max_value=1e6))
def test_lower_loss_means_higher_reward(loss):
    assert reward_from_loss(loss).value > reward_from_loss(loss * 1.01).value


def test_reward_from_accuracy_takes_the_peak():
    assert reward_from_accuracy([(0, 0.2), (10, 0.48), (20, 0.41)]).value == 0.48
    log = MetricsLog.from_list([[0, "val_accuracy", 0.3], [5, "loss", 9.0], [10, "val_accuracy", 0.6]])
    assert reward_from_accuracy(log).value == 0.6
    with pytest.raises(NoAccuracyRecords):
        reward_from_accuracy([])
    with pytest.raises(NoAccuracyRecords):
        reward_from_accuracy(MetricsLog.from_list([[0, "loss", 1.0]]))


def test_reward_bounds():
    with pytest.raises(ValueError):
        Reward(-0.1, RewardKind.SYNTHETIC)
    with pytest.raises(ValueError):
        Reward(1.2, RewardKind.ACCURACY)


def test_metrics_steps_must_not_go_backwards():
    with pytest.raises(ValueError):
        MetricsLog.from_list([[5, "val_loss", 3.0], [4, "val_loss", 2.9]])
    # different names are independent
    log = MetricsLog.from_list([[5, "a", 1.0], [1, "b", 2.0]])
    assert log.last("a") == 1.0 and log.last("missing") is None


def test_exploit_ideas_need_parents():
    with pytest.raises(ValueError):
        Idea("x", "tweak", source=IdeaSource.EXPLOIT)
    assert Idea("x", "tweak", source=IdeaSource.EXPLOIT, parent_ids=["a"]).parent_ids == ("a",)


def test_failed_trajectory_cannot_carry_reward():
    with pytest.raises(ValueError):
        Trajectory(Idea("x", "y"), 0, ExecutionStatus.RUN_FAILED, 0.5)


def test_count_tokens():
    assert count_tokens(None) == 0
    assert count_tokens("  a b\n c\t") == 3


def test_record_has_exactly_the_persisted_fields():
    rec = make_traj(0, 0.4).to_record("run")
    assert tuple(sorted(rec)) == tuple(sorted(TRAJECTORY_FIELDS))


texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)


@given(
    st.lists(
        st.tuples(texts, st.one_of(st.none(), texts), st.floats(0, 10), st.booleans(), st.integers(0, 5)),
        max_size=8,
    )
)
def test_trajectory_jsonl_roundtrip(rows):
    trajs = []
    for i, (text, thinking, reward, ok, epoch) in enumerate(rows):
        status = ExecutionStatus.SUCCEEDED if ok else ExecutionStatus.PATCH_FAILED
        metrics = MetricsLog.from_list([[0, "reward", reward]]) if ok else MetricsLog()
        trajs.append(Trajectory(Idea(f"i{i}", text, thinking), epoch, status, reward if ok else 0.0, metrics,
                                timestamps={"submitted": i}))
    blob = dump_trajectories(trajs, "r1")
    run_id, back = load_trajectories(blob)
    assert run_id == ("r1" if trajs else None)
    assert dump_trajectories(back, "r1") == blob
    for line in blob.split("\n")[:-1]:
        assert list(json.loads(line)) == sorted(json.loads(line))
