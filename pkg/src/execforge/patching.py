"""Strict unified-diff parsing and application over in-memory file trees.

A file tree is a ``dict`` mapping POSIX relative paths to text contents.
Application uses exact context matching with no fuzz; a hunk may land at an
offset from its stated line number, but every context and removed line must
match byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

FileTree = dict[str, str]

DEV_NULL = "/dev/null"
_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
_FENCE_RE = re.compile(r"```(?:diff|patch)?[ \t]*\n(.*?)```", re.S)


class DiffParseError(ValueError):
    pass


@dataclass
class Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: list[tuple[str, str]] = field(default_factory=list)  # (tag, text), tag in " -+"
    old_no_eol: bool = False
    new_no_eol: bool = False

    @property
    def header(self) -> str:
        return f"@@ -{self.old_start},{self.old_count} +{self.new_start},{self.new_count} @@"

    def old_lines(self) -> list[str]:
        return [t for tag, t in self.lines if tag in " -"]

    def new_lines(self) -> list[str]:
        return [t for tag, t in self.lines if tag in " +"]


@dataclass
class FilePatch:
    old_path: str | None  # None for created files
    new_path: str | None  # None for deleted files
    hunks: list[Hunk] = field(default_factory=list)

    @property
    def path(self) -> str:
        return self.new_path or self.old_path or ""

    def paths(self) -> set[str]:
        return {p for p in (self.old_path, self.new_path) if p}


def _clean_path(raw: str) -> str | None:
    p = raw.split("\t", 1)[0].strip()
    if p == DEV_NULL:
        return None
    if p.startswith(("a/", "b/")):
        p = p[2:]
    return p


def extract_diff(text: str) -> str:
    """Pull the diff out of a model completion, dropping markdown fences."""
    blocks = _FENCE_RE.findall(text)
    if blocks:
        return "".join(b if b.endswith("\n") else b + "\n" for b in blocks)
    return text


def parse_unified_diff(text: str) -> list[FilePatch]:
    # same line model as file contents, so form feeds and CRs stay inside lines
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    patches: list[FilePatch] = []
    i = 0
    current: FilePatch | None = None
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            current = FilePatch(_clean_path(line[4:]), _clean_path(lines[i + 1][4:]))
            if current.old_path is None and current.new_path is None:
                raise DiffParseError(f"line {i + 1}: both sides are {DEV_NULL}")
            patches.append(current)
            i += 2
            continue
        m = _HUNK_RE.match(line)
        if m:
            if current is None:
                raise DiffParseError(f"line {i + 1}: hunk before any file header")
            hunk = Hunk(
                int(m.group(1)),
                1 if m.group(2) is None else int(m.group(2)),
                int(m.group(3)),
                1 if m.group(4) is None else int(m.group(4)),
            )
            i += 1
            old_left, new_left = hunk.old_count, hunk.new_count
            while old_left > 0 or new_left > 0:
                if i >= len(lines):
                    raise DiffParseError(f"{current.path} {hunk.header}: truncated hunk")
                body = lines[i]
                tag, rest = (body[0], body[1:]) if body else (" ", "")
                if tag == "\\":
                    _mark_no_eol(hunk)
                    i += 1
                    continue
                if tag not in " -+":
                    raise DiffParseError(
                        f"{current.path} {hunk.header}: unexpected line {i + 1}: {body[:60]!r}"
                    )
                if tag in " -":
                    old_left -= 1
                if tag in " +":
                    new_left -= 1
                if old_left < 0 or new_left < 0:
                    raise DiffParseError(f"{current.path} {hunk.header}: line counts do not match header")
                hunk.lines.append((tag, rest))
                i += 1
            if i < len(lines) and lines[i].startswith("\\"):
                _mark_no_eol(hunk)
                i += 1
            current.hunks.append(hunk)
            continue
        i += 1
    if not patches and text.strip():
        raise DiffParseError("no file headers found")
    return patches


def _mark_no_eol(hunk: Hunk) -> None:
    tag = hunk.lines[-1][0] if hunk.lines else " "
    if tag in " -":
        hunk.old_no_eol = True
    if tag in " +":
        hunk.new_no_eol = True


def _split(content: str) -> tuple[list[str], bool]:
    if content == "":
        return [], True
    return content.split("\n")[:-1] if content.endswith("\n") else content.split("\n"), content.endswith("\n")


def _join(lines: list[str], eol: bool) -> str:
    if not lines:
        return ""
    return "\n".join(lines) + ("\n" if eol else "")


def _locate(lines: list[str], want: list[str], start: int) -> int | None:
    """Nearest index to ``start`` where ``want`` matches exactly."""
    n = len(lines)
    if not want:
        return min(max(start, 0), n)
    for delta in range(n + 1):
        for pos in (start - delta, start + delta) if delta else (start,):
            if 0 <= pos <= n - len(want) and lines[pos:pos + len(want)] == want:
                return pos
    return None


class PatchRejected(Exception):
    pass


def _apply_file(content: str | None, fp: FilePatch, log: list[str]) -> str | None:
    if fp.old_path is None:
        if content is not None:
            raise PatchRejected(f"{fp.path}: file to create already exists")
        content = ""
    elif content is None:
        raise PatchRejected(f"{fp.path}: file not found in baseline")
    lines, eol = _split(content)
    offset = 0
    floor = 0
    for k, h in enumerate(fp.hunks, 1):
        want = h.old_lines()
        stated = (h.old_start - 1 if h.old_count else h.old_start) + offset
        pos = _locate(lines, want, stated)
        if pos is None or pos < floor:
            raise PatchRejected(f"{fp.path}: hunk #{k} {h.header} FAILED (context mismatch)")
        if pos != stated:
            log.append(f"{fp.path}: hunk #{k} succeeded at {pos + 1} (offset {pos - stated} lines)")
        if h.old_no_eol and pos + len(want) == len(lines) and eol:
            raise PatchRejected(f"{fp.path}: hunk #{k} {h.header} FAILED (end-of-file newline mismatch)")
        new = h.new_lines()
        at_eof = pos + len(want) == len(lines)
        lines[pos:pos + len(want)] = new
        if at_eof:
            eol = not h.new_no_eol
        offset += len(new) - len(want)
        floor = pos + len(new)
    if fp.new_path is None:
        if lines:
            raise PatchRejected(f"{fp.path}: deleted file still has content after hunks")
        return None
    return _join(lines, eol)


def apply_file_patches(tree: FileTree, patches: list[FilePatch]) -> tuple[FileTree, list[str]]:
    """Apply all file patches atomically; raises :class:`PatchRejected` on any failure."""
    out = dict(tree)
    log: list[str] = []
    for fp in patches:
        src = fp.old_path
        content = out.get(src) if src is not None else out.get(fp.new_path or "")
        result = _apply_file(content, fp, log)
        if src is not None:
            out.pop(src, None)
        if fp.new_path is not None and result is not None:
            out[fp.new_path] = result
    return out, log


def touched_paths(text: str) -> set[str]:
    paths: set[str] = set()
    for fp in parse_unified_diff(text):
        paths |= fp.paths()
    return paths
