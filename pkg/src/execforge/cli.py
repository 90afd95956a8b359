"""``execforge`` command line: search, best-of-n, rlsim, analyze, scheduler, worker, implement."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .analysis import RuleJudge, ScriptedJudge, report
from .domain import Idea, dump_trajectories
from .environments import Environment, Resources, load_manifest
from .gateway import (
    EndpointUnavailable,
    FileStore,
    GatewayError,
    HttpEndpoint,
    MetricsSink,
    ScriptedEndpoint,
    StoreUnavailable,
    artifact_key,
    sha256_hex,
)
from .implementer import AllCandidatesFailed, ImplementerConfig, implement_idea
from .mocks import LatticeCoder, MutationIdeator, TwoModeIdeator
from .rlsim import RLConfig, train_rl
from .scheduler import STATE_FILE, Scheduler, WorkerSlot, make_job
from .search import PipelineExecutor, SearchConfig, SyntheticExecutor, best_of_n, run_search, search_summary
from .worker import execute, upload_result

logger = logging.getLogger("execforge")

EXIT_OK, EXIT_CONFIG, EXIT_GATEWAY = 0, 1, 2


class ConfigError(Exception):
    pass


def _read_json(path: str | None, what: str) -> dict[str, Any]:
    if not path:
        raise ConfigError(f"missing --{what}")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _load_env(path: str | None) -> Environment:
    if not path:
        raise ConfigError("missing --env")
    if not Path(path).is_file():
        raise ConfigError(f"environment manifest not found: {path}")
    try:
        return load_manifest(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad environment manifest {path}: {exc}") from exc


def _digest(obj: Any) -> str:
    return sha256_hex(json.dumps(obj, sort_keys=True))


_DEFAULT_ENDPOINTS = {("ideator", "lattice"): "mutation", ("ideator", "twomode"): "twomode", ("coder", "lattice"): "lattice"}


def build_endpoint(spec: dict[str, Any] | None, env: Environment, seed: int, role: str):
    """Build an ideator or coder from its JSON description; mocks are the default for synthetic envs."""
    spec = dict(spec or {})
    kind = spec.get("kind") or _DEFAULT_ENDPOINTS.get((role, env.env_id))
    seed = int(spec.get("seed", seed))
    if kind == "mutation":
        return MutationIdeator(env.synthetic, seed)
    if kind == "twomode":
        return TwoModeIdeator(env.synthetic, seed)
    if kind == "lattice":
        return LatticeCoder(env.synthetic, seed, float(spec.get("break_rate", 0.0)), bool(spec.get("touch_frozen", False)))
    if kind == "scripted":
        if not Path(spec.get("script", "")).is_file():
            raise ConfigError(f"{role}: script file not found: {spec.get('script')}")
        return ScriptedEndpoint.from_file(spec["script"])
    if kind == "http":
        return HttpEndpoint(
            spec["url"], spec.get("model", "default"),
            attempts=int(spec.get("attempts", 3)), backoff_s=float(spec.get("backoff_s", 1.0)),
        )
    raise ConfigError(f"{role}: unknown or missing endpoint kind {kind!r}")


class RunDir:
    """Run directory with a manifest written before work starts and finalized once."""

    def __init__(self, path: Path, run_id: str, subcommand: str, config: Any, env: Any, seed: int | None):
        self.path = path
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "run_id": run_id,
            "subcommand": subcommand,
            "config_digest": _digest(config),
            "environment_digest": _digest(env) if env is not None else None,
            "seed": seed,
            "tool_version": __version__,
            "started_at": time.time(),
            "finished_at": None,
        }
        self._write()

    def _write(self) -> None:
        (self.path / "manifest.json").write_text(json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")

    def finalize(self, status: str = "ok") -> None:
        if self.manifest["finished_at"] is not None:
            raise RuntimeError("manifest already finalized")
        self.manifest["finished_at"] = time.time()
        self.manifest["status"] = status
        self._write()


def write_trajectories(out: Path, trajs, run_id: str) -> None:
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    with_refs = []
    for t in trajs:
        ref = f"logs/{t.idea.id}.log"
        (out / ref).write_text(t.execution_log)
        with_refs.append(dataclasses.replace(t, execution_log_ref=ref))
    (out / "trajectories.jsonl").write_text(dump_trajectories(with_refs, run_id))


def _search_setup(args, subcommand: str):
    raw = _read_json(args.config, "config")
    if args.seed_override is not None:
        raw["seed"] = args.seed_override
    env = _load_env(args.env)
    try:
        cfg = SearchConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad search config: {exc}") from exc
    run_id = raw.get("run_id") or f"{subcommand}-{_digest([raw, env.to_json()])[:10]}"
    out = Path(args.out or Path("runs") / run_id)
    ideator = build_endpoint(raw.get("ideator"), env, cfg.seed, "ideator")
    mode = raw.get("executor", "synthetic" if env.synthetic is not None and not env.entrypoint else "pipeline")
    if mode == "synthetic":
        executor = SyntheticExecutor(env, cfg.seed)
    elif mode == "pipeline":
        coder = build_endpoint(raw.get("coder"), env, cfg.seed, "coder")
        impl = ImplementerConfig(**raw.get("implementer", {}))
        store_root = Path(args.store_root) if args.store_root else out / "store"
        executor = PipelineExecutor(
            env, coder, run_id, FileStore(store_root), MetricsSink(store_root / "metrics"), impl,
            workers=int(raw.get("workers", 4)), work_root=str(out / "work"),
        )
    else:
        raise ConfigError(f"unknown executor {mode!r}")
    if env.baseline_reward is None and cfg.beta is None:
        raise ConfigError(f"{env.env_id}: manifest needs baseline_reward (or set beta in the search config)")
    return raw, env, cfg, run_id, out, ideator, executor


def cmd_search(args) -> int:
    raw, env, cfg, run_id, out, ideator, executor = _search_setup(args, "search")
    run = RunDir(out, run_id, "search", raw, env.to_json(), cfg.seed)
    try:
        result = run_search(cfg, ideator, executor, env)
    finally:
        if hasattr(executor, "close"):
            executor.close()
    (out / "run_config.json").write_text(
        json.dumps({"search": cfg.to_json(), "env": env.to_json(), "beta": result.beta, "run_id": run_id}, sort_keys=True, indent=1) + "\n"
    )
    write_trajectories(out, result.trajectories, run_id)
    (out / "search_summary.json").write_text(json.dumps(search_summary(result), sort_keys=True, indent=1) + "\n")
    rep = report(out)
    run.finalize()
    print(json.dumps({"run_dir": str(out), "n": rep["n_ideas"], "best": rep["benchmark"]["succeeded"]["best"]}))
    return EXIT_OK


def cmd_best_of_n(args) -> int:
    raw, env, cfg, run_id, out, ideator, executor = _search_setup(args, "best-of-n")
    n = args.n if args.n is not None else cfg.N * (cfg.T + 1)
    run = RunDir(out, run_id, "best-of-n", raw, env.to_json(), cfg.seed)
    try:
        trajs = best_of_n(ideator, executor, n)
    finally:
        if hasattr(executor, "close"):
            executor.close()
    beta = cfg.beta if cfg.beta is not None else env.beta
    (out / "run_config.json").write_text(
        json.dumps({"best_of_n": n, "env": env.to_json(), "beta": beta, "run_id": run_id}, sort_keys=True, indent=1) + "\n"
    )
    write_trajectories(out, trajs, run_id)
    rep = report(out)
    run.finalize()
    print(json.dumps({"run_dir": str(out), "n": rep["n_ideas"], "best": rep["benchmark"]["succeeded"]["best"]}))
    return EXIT_OK


def cmd_rlsim(args) -> int:
    raw = _read_json(args.config, "config")
    if args.seed_override is not None:
        raw["seed"] = args.seed_override
    try:
        cfg = RLConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad rl config: {exc}") from exc
    out_file = Path(args.out or Path("runs") / f"rlsim-{_digest(raw)[:10]}" / "dynamics.jsonl")
    run = RunDir(out_file.parent, f"rlsim-{_digest(raw)[:10]}", "rlsim", raw, None, cfg.seed)
    result = train_rl(cfg)
    out_file.write_text("".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in result.dynamics))
    run.finalize()
    last = result.dynamics[-1]
    print(json.dumps({"dynamics": str(out_file), "final_avg_reward": last.avg_reward, "final_converged": last.converged_idea_count}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    tpath = Path(args.trajectories)
    if not tpath.is_file():
        raise ConfigError(f"trajectories file not found: {tpath}")
    if args.judge == "rule":
        judge = RuleJudge()
    elif args.judge == "scripted":
        if not args.judge_script:
            raise ConfigError("--judge scripted needs --judge-script")
        judge = ScriptedJudge.from_file(args.judge_script)
    else:
        judge = None
    patterns: list[str] = []
    if args.patterns:
        p = Path(args.patterns)
        if not p.is_file():
            raise ConfigError(f"patterns file not found: {p}")
        patterns = [ln.strip() for ln in p.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    rep = report(tpath.parent, judge, patterns, trajectories_path=tpath)
    print(json.dumps({"report": str(tpath.parent / "report.json"), "n": rep["n_ideas"]}))
    return EXIT_OK


def _store_root(args) -> Path:
    if not args.store_root:
        raise ConfigError("missing --store-root")
    return Path(args.store_root)


def cmd_scheduler(args) -> int:
    root = _store_root(args)
    env = _load_env(args.env)
    store = FileStore(root)
    capacity = Resources(args.gpus_per_worker, args.cpus_per_worker, args.memory_per_worker)
    slots = [WorkerSlot(i, capacity) for i in range(args.workers)]
    sched = Scheduler(
        store, env,
        lambda job: execute(job, store, env, work_root=root / "work"),
        slots, MetricsSink(root / "metrics"), root / STATE_FILE, tick_s=args.tick_ms / 1000.0,
    )
    try:
        sched.run(max_ticks=args.max_ticks, until_idle=args.until_idle)
    finally:
        sched.shutdown()
    print(json.dumps({"executed": len(sched.results), "pending": len(sched.state.pending)}))
    return EXIT_OK


def cmd_worker(args) -> int:
    root = _store_root(args)
    env = _load_env(args.env)
    store = FileStore(root)
    job = make_job(args.key, store.digest_of(args.key), env)
    result = execute(job, store, env, work_root=root / "work")
    key = upload_result(result, store, MetricsSink(root / "metrics"))
    print(json.dumps({"status": result.status.value, "result_key": key, "metrics": result.metrics.to_list()}))
    return EXIT_OK


def cmd_implement(args) -> int:
    root = _store_root(args)
    env = _load_env(args.env)
    coder_spec = _read_json(args.coder, "coder") if args.coder else None
    coder = build_endpoint(coder_spec, env, args.seed_override or 0, "coder")
    cfg = ImplementerConfig(args.k_parallel, args.max_revisions)
    idea = Idea(f"i{args.epoch}-{args.index}", args.idea)
    key = artifact_key(args.run_id, args.epoch, args.index)
    try:
        res = implement_idea(idea, env.baseline_tree(), env, cfg, coder, FileStore(root), key)
    except AllCandidatesFailed as exc:
        print(json.dumps({"status": "guard_violation" if exc.guard_violation else "patch_failed", "attempts": exc.attempts}))
        return EXIT_OK
    print(json.dumps({"status": "applied", "key": res.key, "digest": res.digest, "sample_index": res.sample_index, "attempts": res.attempts}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
        flags = argparse.ArgumentParser(add_help=False)
        flags.add_argument("--store-root", default=default, help="artifact store directory")
        flags.add_argument("--seed-override", type=int, default=default, help="replace the seed given in the config")
        flags.add_argument("--verbose", "-v", action="store_true", default=default or False)
        return flags

    common = global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="execforge", description=__doc__, parents=[global_flags(None)])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("search", cmd_search, "execution-guided evolutionary search"),
                            ("best-of-n", cmd_best_of_n, "independent sampling baseline")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--env", required=True)
        p.add_argument("--out")
        if name == "best-of-n":
            p.add_argument("--n", type=int, help="number of samples (default N*(T+1))")
        p.set_defaults(func=fn)

    p = sub.add_parser("rlsim", parents=[common], help="toy RL from execution reward")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="dynamics.jsonl path")
    p.set_defaults(func=cmd_rlsim)

    p = sub.add_parser("analyze", parents=[common], help="report on a trajectories.jsonl")
    p.add_argument("trajectories")
    p.add_argument("--judge", choices=("rule", "scripted", "none"), default="rule")
    p.add_argument("--judge-script")
    p.add_argument("--patterns")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("scheduler", parents=[common], help="poll the store and run jobs")
    p.add_argument("--env", required=True)
    p.add_argument("--tick-ms", type=int, default=5000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--gpus-per-worker", type=int, default=8)
    p.add_argument("--cpus-per-worker", type=int, default=64)
    p.add_argument("--memory-per-worker", type=float, default=1024.0)
    p.add_argument("--max-ticks", type=int)
    p.add_argument("--until-idle", action="store_true")
    p.set_defaults(func=cmd_scheduler)

    p = sub.add_parser("worker", parents=[common], help="execute one stored codebase")
    p.add_argument("--env", required=True)
    p.add_argument("--key", required=True)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("implement", parents=[common], help="turn one idea into a stored codebase")
    p.add_argument("--env", required=True)
    p.add_argument("--idea", required=True)
    p.add_argument("--coder", help="coder endpoint JSON")
    p.add_argument("--run-id", default="manual")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--k-parallel", type=int, default=10)
    p.add_argument("--max-revisions", type=int, default=2)
    p.set_defaults(func=cmd_implement)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"execforge: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GatewayError, EndpointUnavailable, StoreUnavailable) as exc:
        print(f"execforge: gateway failure: {exc}", file=sys.stderr)
        return EXIT_GATEWAY


if __name__ == "__main__":
    sys.exit(main())
