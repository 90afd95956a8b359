import json
import sys

import pytest

from execforge.domain import ExecutionStatus
from execforge.environments import Environment, Resources, lattice_environment, LatticeTuneSpec
from execforge.gateway import MemoryStore, MetricsSink, sha256_hex
from execforge.implementer import canonical_zip
from execforge.scheduler import make_job
from execforge.worker import execute, parse_metrics_file, read_result, upload_result

LATTICE = lattice_environment(process=True)


def script_env(timeout=10.0):
    return Environment("scripted", "synthetic", (), Resources(0, 1, 0.1), timeout, ("{python}", "main.py"))


def submit(store, env, tree, key="runs/r/epoch0/idea0.zip"):
    digest = store.put_artifact(key, canonical_zip(tree))
    return make_job(key, digest, env)


def test_lattice_baseline_runs_end_to_end(tmp_path):
    store = MemoryStore()
    tree = dict(LATTICE.baseline_tree())
    tree["config.py"] = tree["config.py"].replace("(0, 0, 0, 0)", "(5, 5, 5, 5)")
    res = execute(submit(store, LATTICE, tree), store, LATTICE, work_root=tmp_path)
    assert res.status is ExecutionStatus.SUCCEEDED, res.execution_log
    assert res.metrics.last("reward") == pytest.approx(LatticeTuneSpec().reward((5, 5, 5, 5)))
    assert list(tmp_path.iterdir()) == []  # workdir removed


def test_nonzero_exit_keeps_partial_metrics(tmp_path):
    env = script_env()
    code = (
        "import json\n"
        "open('metrics.jsonl','w').write(json.dumps({'step':0,'name':'val_loss','value':4.0})+'\\n')\n"
        "raise SystemExit(3)\n"
    )
    store = MemoryStore()
    res = execute(submit(store, env, {"main.py": code}), store, env, work_root=tmp_path)
    assert res.status is ExecutionStatus.RUN_FAILED
    assert res.metrics.last("val_loss") == 4.0 and not res.metrics.terminal
    assert "exit code 3" in res.execution_log


def test_timeout_kills_the_process_group(tmp_path):
    env = script_env(timeout=0.5)
    code = "import subprocess, sys, time\nsubprocess.Popen([sys.executable, '-c', 'import time; time.sleep(60)'])\ntime.sleep(60)\n"
    store = MemoryStore()
    res = execute(submit(store, env, {"main.py": code}), store, env, work_root=tmp_path)
    assert res.status is ExecutionStatus.TIMED_OUT


def test_success_without_metrics_is_a_run_failure(tmp_path):
    env = script_env()
    store = MemoryStore()
    res = execute(submit(store, env, {"main.py": "print('hi')\n"}), store, env, work_root=tmp_path)
    assert res.status is ExecutionStatus.RUN_FAILED
    assert "hi" in res.execution_log


def test_digest_mismatch_is_detected(tmp_path):
    env = script_env()
    store = MemoryStore()
    job = submit(store, env, {"main.py": "pass\n"})
    job = make_job(job.codebase_key, sha256_hex(b"something else"), env)
    assert execute(job, store, env, work_root=tmp_path).status is ExecutionStatus.RUN_FAILED


def test_unsafe_archive_paths_are_refused(tmp_path):
    env = script_env()
    store = MemoryStore()
    res = execute(submit(store, env, {"../escape.py": "x\n", "main.py": "pass\n"}), store, env, work_root=tmp_path / "w")
    assert res.status is ExecutionStatus.RUN_FAILED
    assert not (tmp_path / "escape.py").exists()


def test_upload_is_idempotent(tmp_path):
    store, sink = MemoryStore(), MetricsSink()
    tree = LATTICE.baseline_tree()
    job = submit(store, LATTICE, tree)
    res = execute(job, store, LATTICE, work_root=tmp_path)
    key = upload_result(res, store, sink)
    assert upload_result(res, store, sink) == key
    stored = read_result(store, job)
    assert stored["status"] == "succeeded" and stored["job"]["codebase_digest"] == job.codebase_digest


def test_parse_metrics_file_rejects_garbage(tmp_path):
    p = tmp_path / "metrics.jsonl"
    p.write_text(json.dumps({"step": 0, "name": "a", "value": 1}) + "\nnot json\n")
    with pytest.raises(ValueError):
        parse_metrics_file(p, True)
