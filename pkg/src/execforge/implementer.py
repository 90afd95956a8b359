"""Turn an idea into a patched, zipped codebase.

``k_parallel`` candidate diffs are sampled at once. Each candidate runs its own
pipeline: apply, and on failure hand the patch log back to the model for up to
``max_revisions`` sequential revisions. The winner is the lowest-index pipeline
that produced a clean, guard-passing tree.
"""

from __future__ import annotations

import io
import json
import logging
import threading
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .domain import Idea
from .environments import Environment, guard_frozen_paths
from .gateway import ModelEndpoint, ModelRequest, sha256_hex
from .patching import DiffParseError, FileTree, PatchRejected, apply_file_patches, extract_diff, parse_unified_diff
from .worker import meta_key_for

logger = logging.getLogger(__name__)

ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class ImplementerConfig:
    k_parallel: int = 10
    max_revisions: int = 2
    temperature: float = 1.0
    max_output_tokens: int = 8192

    def __post_init__(self) -> None:
        if self.k_parallel < 1:
            raise ValueError("k_parallel must be >= 1")
        if self.max_revisions < 0:
            raise ValueError("max_revisions must be >= 0")

    @property
    def max_attempts(self) -> int:
        return self.k_parallel * (1 + self.max_revisions)


@dataclass(frozen=True)
class PatchOutcome:
    applied: bool
    patch_log: str
    patched_tree: FileTree | None = None

    def __post_init__(self) -> None:
        if self.applied != (self.patched_tree is not None):
            raise ValueError("patched_tree must be present exactly when applied")
        if not self.applied and not self.patch_log:
            raise ValueError("a failed patch needs a log")


class AllCandidatesFailed(Exception):
    def __init__(self, attempts: int, logs: dict[int, str], guard_violation: bool = False):
        self.attempts = attempts
        self.logs = logs
        self.guard_violation = guard_violation
        super().__init__(f"no candidate diff applied after {attempts} attempts")


@dataclass(frozen=True)
class ImplementResult:
    key: str
    digest: str
    diff: str
    sample_index: int
    attempts: int
    tree: FileTree = field(repr=False, default_factory=dict)


def apply_patch(baseline: FileTree, diff: str) -> PatchOutcome:
    """Apply ``diff`` strictly. Failures are returned, never raised."""
    try:
        patches = parse_unified_diff(diff)
    except DiffParseError as exc:
        return PatchOutcome(False, f"malformed diff: {exc}")
    try:
        tree, notes = apply_file_patches(baseline, patches)
    except PatchRejected as exc:
        return PatchOutcome(False, str(exc))
    return PatchOutcome(True, "\n".join(notes), tree)


def canonical_zip(tree: FileTree) -> bytes:
    """Zip with sorted entries and fixed metadata so equal trees give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for path in sorted(tree):
            info = zipfile.ZipInfo(path, date_time=ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, tree[path].encode("utf-8"))
    return buf.getvalue()


def render_codebase(tree: FileTree) -> str:
    return "\n".join(f"=== {path} ===\n{tree[path]}" for path in sorted(tree))


def implement_prompt(idea: Idea, baseline: FileTree) -> str:
    return (
        "You are implementing a research idea in the codebase below.\n"
        "Reply with a single unified diff (---/+++ headers, @@ hunks) against these files.\n\n"
        f"## Idea\n{idea.idea_text}\n\n## Baseline codebase\n{render_codebase(baseline)}\n"
    )


def revise_prompt(idea: Idea, baseline: FileTree, failed_diff: str, patch_log: str, sample_index: int, revision: int) -> str:
    return (
        "Your previous diff could not be applied to the baseline codebase.\n"
        "Return a corrected unified diff.\n\n"
        f"## Candidate\n#{sample_index} revision {revision}\n\n"
        f"## Idea\n{idea.idea_text}\n\n## Baseline codebase\n{render_codebase(baseline)}\n\n"
        f"## Previous diff\n{failed_diff}\n\n## Patch log\n{patch_log}\n"
    )


def propose_diffs(idea: Idea, baseline: FileTree, k: int, endpoint: ModelEndpoint, cfg: ImplementerConfig | None = None) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not baseline:
        raise ValueError("baseline codebase is empty")
    cfg = cfg or ImplementerConfig()
    req = ModelRequest(implement_prompt(idea, baseline), k, cfg.max_output_tokens, cfg.temperature)
    completions = endpoint.generate(req)
    return [extract_diff(c.body_text) for c in completions]


def revise_diff(
    idea: Idea,
    baseline: FileTree,
    failed_diff: str,
    patch_log: str,
    endpoint: ModelEndpoint,
    sample_index: int = 0,
    revision: int = 1,
    cfg: ImplementerConfig | None = None,
) -> str:
    if not patch_log:
        raise ValueError("revision needs a non-empty patch log")
    cfg = cfg or ImplementerConfig()
    prompt = revise_prompt(idea, baseline, failed_diff, patch_log, sample_index, revision)
    (completion,) = endpoint.generate(ModelRequest(prompt, 1, cfg.max_output_tokens, cfg.temperature))
    return extract_diff(completion.body_text)


class _Race:
    """Shared bookkeeping for the candidate pipelines of one idea."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.best: int | None = None
        self.attempts = 0
        self.wins: dict[int, tuple[str, FileTree]] = {}
        self.logs: dict[int, str] = {}
        self.guard_hits: set[int] = set()

    def beaten(self, index: int) -> bool:
        with self.lock:
            return self.best is not None and self.best < index

    def count_attempt(self) -> None:
        with self.lock:
            self.attempts += 1

    def win(self, index: int, diff: str, tree: FileTree) -> None:
        with self.lock:
            self.wins[index] = (diff, tree)
            if self.best is None or index < self.best:
                self.best = index


def _pipeline(index, diff, idea, baseline, env, cfg, endpoint, race: _Race) -> None:
    for revision in range(cfg.max_revisions + 1):
        if race.beaten(index):
            return
        if revision:
            diff = revise_diff(idea, baseline, diff, log, endpoint, index, revision, cfg)
            if race.beaten(index):
                return
        race.count_attempt()
        outcome = apply_patch(baseline, diff)
        if outcome.applied:
            guard = guard_frozen_paths(diff, env)
            if guard.ok:
                race.win(index, diff, outcome.patched_tree)
                return
            with race.lock:
                race.guard_hits.add(index)
            log = "edits frozen evaluation files: " + ", ".join(guard.paths)
        else:
            log = outcome.patch_log
        with race.lock:
            race.logs[index] = log


def implement_idea(
    idea: Idea,
    baseline: FileTree,
    env: Environment,
    cfg: ImplementerConfig,
    endpoint: ModelEndpoint,
    store=None,
    key: str | None = None,
) -> ImplementResult:
    """Run the candidate pipelines concurrently and upload the winning tree to ``key``.

    Raises :class:`AllCandidatesFailed` when every pipeline is exhausted.
    """
    candidates = propose_diffs(idea, baseline, cfg.k_parallel, endpoint, cfg)
    race = _Race()
    with ThreadPoolExecutor(max_workers=cfg.k_parallel) as pool:
        futures = [
            pool.submit(_pipeline, i, d, idea, baseline, env, cfg, endpoint, race)
            for i, d in enumerate(candidates)
        ]
        for f in futures:
            f.result()
    if race.best is None:
        only_guard = bool(race.guard_hits) and race.guard_hits == set(range(cfg.k_parallel))
        raise AllCandidatesFailed(race.attempts, dict(race.logs), guard_violation=only_guard)
    diff, tree = race.wins[race.best]
    blob = canonical_zip(tree)
    digest = sha256_hex(blob)
    if store is not None and key is not None:
        store.put_artifact(key, blob)
        meta = {"idea_id": idea.id, "idea_text": idea.idea_text, "diff": diff}
        store.put_artifact(meta_key_for(key), json.dumps(meta, sort_keys=True).encode())
    logger.debug("idea %s: candidate #%d won after %d attempts", idea.id, race.best, race.attempts)
    return ImplementResult(key or "", digest, diff, race.best, race.attempts, tree)
