"""Deterministic stand-ins for the ideator and coder models on the synthetic environments.

Each mock is a pure function of (seed, prompt, sample index) so repeated runs
produce byte-identical outputs.
"""

from __future__ import annotations

import difflib
import re

import numpy as np

from .environments import LatticeTuneSpec, TwoModeSpec
from .gateway import Completion, FunctionEndpoint, sha256_hex

TASK_EXPLOIT = "## Task: exploit"
TASK_EXPLORE = "## Task: explore"
TASK_SAMPLE = "## Task: sample"


def prompt_rng(seed: int, prompt: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(sha256_hex(prompt)[:15], 16), index])


def _section(prompt: str, title: str) -> str:
    m = re.search(rf"^## {re.escape(title)}\n(.*?)(?=^## |\Z)", prompt, re.S | re.M)
    return m.group(1) if m else ""


class MutationIdeator(FunctionEndpoint):
    """LatticeTune ideator.

    Explore and sample prompts get a uniformly random lattice point; exploit
    prompts get a +-1 change to one coordinate of a uniformly chosen parent
    listed in the prompt.
    """

    def __init__(self, spec: LatticeTuneSpec | None = None, seed: int = 0):
        self.spec = spec or LatticeTuneSpec()
        self.seed = seed
        super().__init__(self._respond)

    def _respond(self, prompt: str, index: int) -> Completion:
        rng = prompt_rng(self.seed, prompt, index)
        spec = self.spec
        if TASK_EXPLOIT in prompt:
            parents = [spec.parse(m.group(0)) for m in spec._PATTERN.finditer(_section(prompt, "Parents"))]
            parents = [p for p in parents if p is not None]
            if parents:
                x = list(parents[int(rng.integers(len(parents)))])
                coord = int(rng.integers(len(x)))
                step = 1 if rng.random() < 0.5 else -1
                if not spec.low <= x[coord] + step <= spec.high:
                    step = -step
                x[coord] += step
                return Completion(spec.format(x))
        x = rng.integers(spec.low, spec.high + 1, size=spec.dimension)
        return Completion(spec.format(x))


class TwoModeIdeator(FunctionEndpoint):
    """Samples TwoMode ideas uniformly, with synthetic thinking traces of the declared length."""

    def __init__(self, spec: TwoModeSpec | None = None, seed: int = 0):
        self.spec = spec or TwoModeSpec()
        self.seed = seed
        super().__init__(self._respond)

    def _respond(self, prompt: str, index: int) -> Completion:
        rng = prompt_rng(self.seed, prompt, index)
        idea = self.spec.ideas[int(rng.integers(len(self.spec.ideas)))]
        return Completion(idea.text, thinking_trace(idea.thinking_len))


def thinking_trace(n_tokens: int) -> str:
    return " ".join(f"t{i}" for i in range(n_tokens))


class LatticeCoder(FunctionEndpoint):
    """Coder model for the LatticeTune process environment.

    Rewrites ``X = (...)`` in ``config.py`` to the point named by the idea.
    With probability ``break_rate`` a first-try diff carries stale context so the
    revision loop is exercised; revisions are always correct. Ideas that name no
    valid point get a non-diff reply.
    """

    def __init__(self, spec: LatticeTuneSpec | None = None, seed: int = 0, break_rate: float = 0.0, touch_frozen: bool = False):
        self.spec = spec or LatticeTuneSpec()
        self.seed = seed
        self.break_rate = break_rate
        self.touch_frozen = touch_frozen
        super().__init__(self._respond)

    def _respond(self, prompt: str, index: int) -> str:
        idea = _section(prompt, "Idea").strip()
        x = self.spec.parse(idea)
        if x is None:
            return "I could not turn this idea into a code change."
        code = _section(prompt, "Baseline codebase")
        m = re.search(r"^=== config\.py ===\n(.*?)(?=^=== |\Z)", code, re.S | re.M)
        if not m:
            return "config.py is missing from the codebase."
        old = m.group(1)
        if old.endswith("\n\n"):
            old = old[:-1]
        new = re.sub(r"^X = .*$", "X = (" + ", ".join(map(str, x)) + ")", old, flags=re.M)
        diff = "".join(difflib.unified_diff(old.splitlines(True), new.splitlines(True), "a/config.py", "b/config.py"))
        if self.touch_frozen:
            diff += "--- a/evaluate.py\n+++ b/evaluate.py\n@@ -1,1 +1,1 @@\n-# Frozen scoring code. Diffs touching this file are rejected.\n+# patched\n"
        revising = "## Patch log" in prompt
        if not revising and prompt_rng(self.seed, prompt, index).random() < self.break_rate:
            diff = diff.replace("-X = ", "-X = (stale) ", 1)
        return "```diff\n" + diff + "```"
