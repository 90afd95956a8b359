import io
import json
import threading
import zipfile

import pytest
from hypothesis import given, settings, strategies as st

from execforge.domain import Idea
from execforge.environments import lattice_environment
from execforge.gateway import FunctionEndpoint, MemoryStore, sha256_hex
from execforge.implementer import (
    AllCandidatesFailed,
    ImplementerConfig,
    apply_patch,
    canonical_zip,
    implement_idea,
    implement_prompt,
)
from execforge.mocks import LatticeCoder
from execforge.patching import extract_diff
from execforge.worker import meta_key_for

ENV = lattice_environment(process=True)
BASE = ENV.baseline_tree()
IDEA = Idea("t0-0", "set x=(7,2,5,1)")
GOOD = LatticeCoder(seed=0)._respond(implement_prompt(IDEA, BASE), 0)
BAD = "--- a/config.py\n+++ b/config.py\n@@ -1,1 +1,1 @@\n-this line is not there\n+X = (1, 1, 1, 1)\n"
FROZEN = "--- a/evaluate.py\n+++ b/evaluate.py\n@@ -1,1 +1,1 @@\n-" + BASE["evaluate.py"].splitlines()[0] + "\n+# rewritten\n"


class Coder:
    """Scripted coder: ``plan[i]`` lists what candidate ``i`` returns at revision 0, 1, 2, ..."""

    def __init__(self, plan, default=BAD):
        self.plan = plan
        self.default = default
        self.lock = threading.Lock()
        self.calls = 0

    def generate(self, req):
        with self.lock:
            self.calls += 1
        if "## Patch log" in req.prompt:
            head = req.prompt.split("## Candidate\n#", 1)[1].split("\n", 1)[0]
            i, rev = int(head.split()[0]), int(head.split()[-1])
            return FunctionEndpoint(lambda p, _: self._pick(i, rev)).generate(req)
        return FunctionEndpoint(lambda p, i: self._pick(i, 0)).generate(req)

    def _pick(self, i, rev):
        seq = self.plan.get(i, [])
        return seq[rev] if rev < len(seq) else self.default


def test_good_diff_applies_and_touches_only_config():
    out = apply_patch(BASE, GOOD)
    assert out.applied and out.patched_tree["config.py"] != BASE["config.py"]
    assert {k: v for k, v in out.patched_tree.items() if k != "config.py"} == {k: v for k, v in BASE.items() if k != "config.py"}


def test_all_fail_uses_exactly_the_attempt_budget():
    cfg = ImplementerConfig()
    assert cfg.max_attempts == 30
    coder = Coder({})
    with pytest.raises(AllCandidatesFailed) as err:
        implement_idea(IDEA, BASE, ENV, cfg, coder)
    assert err.value.attempts == 30
    assert not err.value.guard_violation
    assert set(err.value.logs) == set(range(10))
    assert all("FAILED" in log for log in err.value.logs.values())
    # one proposal call plus two revisions per candidate
    assert coder.calls == 1 + 10 * 2


def test_lowest_successful_index_wins():
    coder = Coder({3: [GOOD], 7: [GOOD], 1: [BAD, BAD, GOOD]})
    res = implement_idea(IDEA, BASE, ENV, ImplementerConfig(), coder)
    assert res.sample_index == 1
    assert res.attempts <= 30


def test_revision_success_is_counted():
    coder = Coder({0: [BAD, GOOD]})
    res = implement_idea(IDEA, BASE, ENV, ImplementerConfig(k_parallel=1), coder)
    assert (res.sample_index, res.attempts) == (0, 2)


def test_last_attempt_success_reaches_the_budget_without_failing():
    coder = Coder({0: [BAD, BAD, GOOD]})
    res = implement_idea(IDEA, BASE, ENV, ImplementerConfig(k_parallel=1), coder)
    assert res.attempts == ImplementerConfig(k_parallel=1).max_attempts


def test_frozen_path_edit_is_a_failed_attempt():
    coder = Coder({}, default=FROZEN)
    with pytest.raises(AllCandidatesFailed) as err:
        implement_idea(IDEA, BASE, ENV, ImplementerConfig(k_parallel=2, max_revisions=1), coder)
    assert err.value.guard_violation and err.value.attempts == 4
    assert "evaluate.py" in err.value.logs[0]


def test_upload_writes_canonical_zip_and_meta():
    store = MemoryStore()
    res = implement_idea(IDEA, BASE, ENV, ImplementerConfig(k_parallel=2), Coder({0: [GOOD], 1: [GOOD]}), store, "runs/r/epoch0/idea0.zip")
    blob = store.get_artifact("runs/r/epoch0/idea0.zip")
    assert sha256_hex(blob) == res.digest
    meta = json.loads(store.get_artifact(meta_key_for(res.key)))
    assert meta["idea_id"] == "t0-0" and meta["diff"] == extract_diff(GOOD) == res.diff
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        assert zf.namelist() == sorted(BASE)
        assert all(i.date_time == (1980, 1, 1, 0, 0, 0) for i in zf.infolist())


@given(st.dictionaries(st.text("abc/._", min_size=1, max_size=8), st.text(max_size=20), max_size=5))
def test_canonical_zip_ignores_insertion_order(tree):
    reordered = dict(reversed(list(tree.items())))
    assert canonical_zip(tree) == canonical_zip(reordered)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=10, max_size=10))
def test_protocol_against_reference(outcomes):
    """Any success pattern: winner is the lowest index that ever succeeds, attempts never exceed 30."""
    plan = {i: [GOOD if ok else BAD for ok in row] for i, row in enumerate(outcomes)}
    winners = [i for i, row in enumerate(outcomes) if any(row)]
    coder = Coder(plan)
    if not winners:
        with pytest.raises(AllCandidatesFailed) as err:
            implement_idea(IDEA, BASE, ENV, ImplementerConfig(), coder)
        assert err.value.attempts == 30
        return
    res = implement_idea(IDEA, BASE, ENV, ImplementerConfig(), coder)
    assert res.sample_index == winners[0]
    needed = outcomes[winners[0]].index(True) + 1
    assert needed <= res.attempts <= 30
