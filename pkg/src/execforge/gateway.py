"""Model endpoint, artifact store and metrics sink, each with a deterministic local backend."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

logger = logging.getLogger(__name__)

DEFAULT_MAX_OUTPUT_TOKENS = 8192
API_KEY_ENV = "EXECFORGE_API_KEY"


class GatewayError(Exception):
    """Base class for failures talking to an external service."""


class EndpointUnavailable(GatewayError):
    retryable = True


class ScriptExhausted(GatewayError):
    """The mock endpoint has no scripted answer for a (prompt, index) pair."""


class StoreUnavailable(GatewayError):
    retryable = True


class UnknownKey(KeyError):
    pass


class KeyConflict(GatewayError):
    """A key was re-put with different content."""


class ConflictingDuplicate(GatewayError):
    """A metric (run_id, step, name) was logged twice with different values."""


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------- model endpoint


@dataclass(frozen=True)
class ModelRequest:
    prompt: str
    n_samples: int = 1
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    temperature: float = 1.0
    stop_markers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class Completion:
    body_text: str
    thinking_text: str | None = None


class ModelEndpoint(Protocol):
    def generate(self, req: ModelRequest) -> list[Completion]: ...


_THINK_RE = re.compile(r"<think>(.*?)</think>", re.S)


def split_thinking(text: str) -> Completion:
    """Separate a ``<think>...</think>`` block from the answer body."""
    m = _THINK_RE.search(text)
    if not m:
        return Completion(text.strip())
    body = (text[: m.start()] + text[m.end():]).strip()
    return Completion(body, m.group(1).strip())


def _as_completion(item: Any) -> Completion:
    if isinstance(item, Completion):
        return item
    if isinstance(item, str):
        return Completion(item)
    if isinstance(item, Mapping):
        return Completion(item.get("body", ""), item.get("thinking"))
    raise TypeError(f"cannot interpret scripted output {item!r}")


class ScriptedEndpoint:
    """Replays canned completions keyed by prompt and sample index.

    Script keys are either the literal prompt or ``"sha256:<hex>"`` of it; values
    are lists indexed by sample index. A ``"*"`` key is a fallback for any prompt.
    """

    def __init__(self, script: Mapping[str, Sequence[Any]]):
        self.script = {k: [_as_completion(x) for x in v] for k, v in script.items()}
        self.calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedEndpoint":
        return cls(json.loads(Path(path).read_text()))

    def lookup(self, prompt: str, index: int) -> Completion:
        for key in (prompt, "sha256:" + sha256_hex(prompt), "*"):
            outs = self.script.get(key)
            if outs is not None:
                if index < len(outs):
                    return outs[index]
                break
        raise ScriptExhausted(f"no scripted output for prompt {sha256_hex(prompt)[:12]} index {index}")

    def generate(self, req: ModelRequest) -> list[Completion]:
        with self._lock:
            self.calls.append(req)
        return [self.lookup(req.prompt, i) for i in range(req.n_samples)]


class FunctionEndpoint:
    """Mock endpoint backed by a pure function ``fn(prompt, index) -> str | Completion``."""

    def __init__(self, fn: Callable[[str, int], Any]):
        self.fn = fn
        self.calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    def generate(self, req: ModelRequest) -> list[Completion]:
        with self._lock:
            self.calls.append(req)
        return [_as_completion(self.fn(req.prompt, i)) for i in range(req.n_samples)]


class HttpEndpoint:
    """Chat-completion style JSON endpoint.

    Transport errors and 5xx responses are retried ``attempts`` times with
    exponential backoff starting at ``backoff_s``.
    """

    def __init__(
        self,
        url: str,
        model: str = "default",
        api_key: str | None = None,
        attempts: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 600.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.sleep = sleep

    def _payload(self, req: ModelRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "n": req.n_samples,
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        }
        if req.stop_markers:
            body["stop"] = list(req.stop_markers)
        return body

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        request = urllib.request.Request(
            self.url, data=json.dumps(payload).encode(), headers=headers, method="POST"
        )
        with urllib.request.urlopen(request, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode())

    def generate(self, req: ModelRequest) -> list[Completion]:
        payload = self._payload(req)
        delay = self.backoff_s
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                data = self._post(payload)
                break
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise GatewayError(f"endpoint rejected request: HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
            logger.warning("endpoint attempt %d/%d failed: %s", attempt + 1, self.attempts, last)
            if attempt + 1 < self.attempts:
                self.sleep(delay)
                delay *= 2
        else:
            raise EndpointUnavailable(f"{self.url} unavailable after {self.attempts} attempts: {last}")

        out = []
        for choice in data.get("choices", [])[: req.n_samples]:
            msg = choice.get("message", {})
            comp = split_thinking(msg.get("content") or "")
            thinking = msg.get("reasoning_content") or comp.thinking_text
            out.append(Completion(comp.body_text, thinking))
        if len(out) != req.n_samples:
            raise EndpointUnavailable(f"expected {req.n_samples} completions, got {len(out)}")
        return out


# --------------------------------------------------------------------------- artifact store


class ArtifactStore(Protocol):
    def put_artifact(self, key: str, data: bytes) -> str: ...
    def get_artifact(self, key: str) -> bytes: ...
    def digest_of(self, key: str) -> str: ...
    def list_new(self, since_cursor: int = 0) -> tuple[list[str], int]: ...


def artifact_key(run_id: str, epoch: int, idea_index: int) -> str:
    return f"runs/{run_id}/epoch{epoch}/idea{idea_index}.zip"


class MemoryStore:
    """In-process store; key order is insertion order and the cursor is an offset into it."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}
        self._digests: dict[str, str] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()

    def put_artifact(self, key: str, data: bytes) -> str:
        digest = sha256_hex(data)
        with self._lock:
            old = self._digests.get(key)
            if old is not None:
                if old != digest:
                    raise KeyConflict(f"{key} already holds different content")
                return digest
            self._blobs[digest] = data
            self._digests[key] = digest
            self._order.append(key)
        return digest

    def get_artifact(self, key: str) -> bytes:
        with self._lock:
            if key not in self._digests:
                raise UnknownKey(key)
            return self._blobs[self._digests[key]]

    def digest_of(self, key: str) -> str:
        with self._lock:
            if key not in self._digests:
                raise UnknownKey(key)
            return self._digests[key]

    def list_new(self, since_cursor: int = 0) -> tuple[list[str], int]:
        with self._lock:
            keys = self._order[since_cursor:]
            return list(keys), len(self._order)


class FileStore:
    """Directory-backed store.

    Layout under ``root``: ``objects/<sha256>`` holds blobs, ``keys.jsonl`` is the
    append-only key log (one ``{"key", "digest"}`` per line) whose line count is
    the cursor.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "objects").mkdir(exist_ok=True)
        self._log = self.root / "keys.jsonl"
        self._log.touch(exist_ok=True)
        self._lock = threading.Lock()

    def _index(self) -> list[tuple[str, str]]:
        try:
            lines = self._log.read_text().splitlines()
        except OSError as exc:
            raise StoreUnavailable(str(exc)) from exc
        out = []
        for line in lines:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["key"], rec["digest"]))
        return out

    def put_artifact(self, key: str, data: bytes) -> str:
        digest = sha256_hex(data)
        with self._lock:
            for k, d in self._index():
                if k == key:
                    if d != digest:
                        raise KeyConflict(f"{key} already holds different content")
                    return digest
            obj = self.root / "objects" / digest
            if not obj.exists():
                tmp = obj.with_suffix(".tmp")
                tmp.write_bytes(data)
                os.replace(tmp, obj)
            with self._log.open("a") as f:
                f.write(json.dumps({"key": key, "digest": digest}, sort_keys=True) + "\n")
        return digest

    def digest_of(self, key: str) -> str:
        for k, d in self._index():
            if k == key:
                return d
        raise UnknownKey(key)

    def get_artifact(self, key: str) -> bytes:
        return (self.root / "objects" / self.digest_of(key)).read_bytes()

    def list_new(self, since_cursor: int = 0) -> tuple[list[str], int]:
        index = self._index()
        return [k for k, _ in index[since_cursor:]], len(index)


# --------------------------------------------------------------------------- metrics sink


class MetricsSink:
    """Append-only per-run metric log; ``root=None`` keeps everything in memory."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, dict[tuple[int, str], float]] = {}
        self._lock = threading.Lock()

    def _path(self, run_id: str) -> Path:
        assert self.root is not None
        return self.root / f"{run_id.replace('/', '_')}.jsonl"

    def _load(self, run_id: str) -> dict[tuple[int, str], float]:
        if self.root is None:
            return self._mem.setdefault(run_id, {})
        path = self._path(run_id)
        if not path.exists():
            return {}
        out = {}
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                out[(rec["step"], rec["name"])] = rec["value"]
        return out

    def log_metrics(self, run_id: str, records: Sequence[Any]) -> int:
        """Append records (``(step, name, value)`` or objects with those attributes).

        Returns the number of records newly written.
        """
        rows = []
        for r in records:
            if isinstance(r, Mapping):
                rows.append((int(r["step"]), str(r["name"]), float(r["value"])))
            elif hasattr(r, "step"):
                rows.append((int(r.step), str(r.name), float(r.value)))
            else:
                step, name, value = r
                rows.append((int(step), str(name), float(value)))
        with self._lock:
            existing = self._load(run_id)
            fresh = []
            for step, name, value in rows:
                old = existing.get((step, name))
                if old is not None:
                    if old != value:
                        raise ConflictingDuplicate(f"{run_id} step {step} {name}: {old} != {value}")
                    continue
                existing[(step, name)] = value
                fresh.append({"step": step, "name": name, "value": value})
            if self.root is not None and fresh:
                with self._path(run_id).open("a") as f:
                    for rec in fresh:
                        f.write(json.dumps(rec, sort_keys=True) + "\n")
        return len(fresh)

    def read_metrics(self, run_id: str) -> list[tuple[int, str, float]]:
        with self._lock:
            return [(s, n, v) for (s, n), v in self._load(run_id).items()]
