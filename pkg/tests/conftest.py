import pytest

from execforge.domain import ExecutionStatus, Idea, IdeaSource, MetricsLog, Trajectory
from execforge.environments import lattice_environment, twomode_environment


@pytest.fixture
def lattice_env():
    return lattice_environment()


@pytest.fixture
def twomode_env():
    return twomode_environment()


def make_traj(idx, reward, epoch=0, status=ExecutionStatus.SUCCEEDED, text=None, thinking=None, source=IdeaSource.SAMPLED):
    """Small trajectory factory shared by several test modules."""
    if status is not ExecutionStatus.SUCCEEDED:
        reward = 0.0
    metrics = MetricsLog.from_list([[0, "reward", reward]], terminal=True) if status is ExecutionStatus.SUCCEEDED else MetricsLog()
    parents = ("p",) if source is IdeaSource.EXPLOIT else ()
    idea = Idea(f"t{epoch}-{idx}", text or f"idea number {idx}", thinking, source, parents)
    return Trajectory(idea, epoch, status, reward, metrics)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
