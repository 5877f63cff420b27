"""Source file loading, comment stripping, line identity, and token counting.

Files are modeled as immutable sequences of lines.  Every derived file
(stripped, marker-annotated, comment-merged) is a new object with its own
content digest, so downstream artifacts can always be validated against the
exact bytes they were computed from.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

ID_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
ID_LENGTH = 8
ID_PATTERN = re.compile(r"[a-z0-9]{8}")

MUMPS_MARKER_RE = re.compile(r"^;<MODULE ([a-z0-9]{8})>$")
ALC_MARKER_RE = re.compile(r"^\* <MODULE ([a-z0-9]{8})>$")


class CorpusError(Exception):
    """Raised when a source file cannot be loaded or is malformed."""


class Language(str, Enum):
    MUMPS = "MUMPS"
    ALC = "ALC"


_EXTENSION_LANGUAGES = {
    ".m": Language.MUMPS,
    ".asm": Language.ALC,
    ".mac": Language.ALC,
}


@dataclass(frozen=True)
class LineRecord:
    """One line of a source file, optionally tagged with a stable identity."""

    index: int
    text: str
    line_id: str | None = None


@dataclass(frozen=True)
class SourceFile:
    path: str
    language: Language
    lines: tuple[LineRecord, ...]
    byte_digest: str
    trailing_newline: bool = True

    @property
    def line_count(self) -> int:
        return len(self.lines)

    @property
    def body(self) -> str:
        """Line texts joined with LF, without the trailing newline."""
        return "\n".join(record.text for record in self.lines)

    @property
    def content(self) -> str:
        """Exact normalized file content, trailing newline included."""
        if not self.lines:
            return ""
        return self.body + ("\n" if self.trailing_newline else "")

    def line_texts(self) -> list[str]:
        return [record.text for record in self.lines]

    def id_to_index(self) -> dict[str, int]:
        return {
            record.line_id: record.index
            for record in self.lines
            if record.line_id is not None
        }


@dataclass(frozen=True)
class TokenBudget:
    """Chunk size cap in tokens; ``limit=None`` means unlimited."""

    limit: int | None

    def __post_init__(self) -> None:
        if self.limit is not None and self.limit <= 0:
            raise ValueError(f"token budget must be positive, got {self.limit}")

    @classmethod
    def unlimited(cls) -> "TokenBudget":
        return cls(None)

    @classmethod
    def finite(cls, limit: int) -> "TokenBudget":
        return cls(int(limit))

    @property
    def is_finite(self) -> bool:
        return self.limit is not None

    def exceeded_by(self, token_count: int) -> bool:
        return self.limit is not None and token_count > self.limit

    def __str__(self) -> str:
        return "unlimited" if self.limit is None else str(self.limit)


UNLIMITED = TokenBudget.unlimited()
DEFAULT_BUDGETS = (512, 1024, 2048, 4096)


class TokenCounter(Protocol):
    name: str

    def count(self, text: str) -> int: ...


class QuarterCharCounter:
    """Deterministic counter approximating BPE density at 4 chars/token."""

    name = "quarter-char"

    def count(self, text: str) -> int:
        return math.ceil(len(text) / 4)


class ExternalVocabCounter:
    """Greedy longest-match counter over a user-supplied vocabulary file.

    The vocabulary is a JSON list (or ``token -> id`` map) of token strings.
    Characters not covered by any vocabulary entry count as one token each.
    """

    def __init__(self, vocab_path: str | Path):
        raw = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        tokens = list(raw.keys()) if isinstance(raw, dict) else list(raw)
        if not tokens or not all(isinstance(t, str) and t for t in tokens):
            raise CorpusError(f"vocabulary file {vocab_path} holds no usable tokens")
        self.name = f"external-vocab:{Path(vocab_path).name}"
        self._vocab = set(tokens)
        self._max_len = max(len(t) for t in tokens)

    def count(self, text: str) -> int:
        total = 0
        pos = 0
        while pos < len(text):
            step = 1
            for width in range(min(self._max_len, len(text) - pos), 0, -1):
                if text[pos : pos + width] in self._vocab:
                    step = width
                    break
            total += 1
            pos += step
        return total


def make_counter(name: str, vocab_path: str | Path | None = None) -> TokenCounter:
    if name == "quarter-char":
        return QuarterCharCounter()
    if name == "external-vocab":
        if vocab_path is None:
            raise CorpusError("external-vocab counter requires a vocabulary path")
        return ExternalVocabCounter(vocab_path)
    raise CorpusError(f"unknown token counter {name!r}")


def count_tokens(counter: TokenCounter, text: str) -> int:
    return counter.count(text)


def content_digest(content: str) -> str:
    return hashlib.sha256(content.encode("utf-8")).hexdigest()


def _split_content(content: str) -> tuple[list[str], bool]:
    if content == "":
        return [], False
    if content.endswith("\n"):
        return content[:-1].split("\n"), True
    return content.split("\n"), False


def _make_lines(texts: Iterable[str]) -> tuple[LineRecord, ...]:
    return tuple(LineRecord(index=i, text=t) for i, t in enumerate(texts))


def file_from_content(
    content: str,
    language: Language,
    path: str = "<memory>",
    trailing_newline: bool | None = None,
) -> SourceFile:
    """Build a SourceFile directly from text (derived files, tests)."""
    texts, trailing = _split_content(content)
    if trailing_newline is not None:
        trailing = trailing_newline
    return SourceFile(
        path=path,
        language=language,
        lines=_make_lines(texts),
        byte_digest=content_digest(content),
        trailing_newline=trailing,
    )


def _rebuild(file: SourceFile, texts: Sequence[str]) -> SourceFile:
    """New SourceFile with the given line texts and a fresh content digest."""
    trailing = file.trailing_newline if texts else False
    content = "\n".join(texts) + ("\n" if trailing and texts else "")
    return SourceFile(
        path=file.path,
        language=file.language,
        lines=_make_lines(texts),
        byte_digest=content_digest(content),
        trailing_newline=trailing,
    )


def detect_newline_convention(raw: bytes) -> str:
    has_crlf = b"\r\n" in raw
    stripped = raw.replace(b"\r\n", b"")
    has_cr = b"\r" in stripped
    has_lf = b"\n" in stripped
    kinds = [k for k, present in (("CRLF", has_crlf), ("CR", has_cr), ("LF", has_lf)) if present]
    if not kinds:
        return "NONE"
    if len(kinds) > 1:
        return "MIXED"
    return kinds[0]


def infer_language(path: str | Path, hint: Language | str | None = None) -> Language:
    if hint is not None:
        return Language(hint)
    language = _EXTENSION_LANGUAGES.get(Path(path).suffix.lower())
    if language is None:
        raise CorpusError(
            f"cannot infer language for {path}: unknown extension and no hint given"
        )
    return language


def load_source(path: str | Path, language_hint: Language | str | None = None) -> SourceFile:
    """Load a source file, normalize newlines to LF, and record its digest."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    if b"\x00" in raw:
        raise CorpusError(f"{path} contains NUL bytes; not a text file")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    language = infer_language(path, language_hint)
    content = text.replace("\r\n", "\n").replace("\r", "\n")
    texts, trailing = _split_content(content)
    return SourceFile(
        path=str(path),
        language=language,
        lines=_make_lines(texts),
        byte_digest=hashlib.sha256(raw).hexdigest(),
        trailing_newline=trailing,
    )


def _strip_mumps_line(text: str) -> str | None:
    """Drop everything from the first ``;`` outside a string literal.

    Returns None when the whole line is comment/whitespace and must go.
    Doubled quotes inside string literals toggle twice, which nets out, so a
    plain quote-parity scan is exact for this grammar.
    """
    in_string = False
    cut = None
    for i, ch in enumerate(text):
        if ch == '"':
            in_string = not in_string
        elif ch == ";" and not in_string:
            cut = i
            break
    if cut is None:
        return text
    kept = text[:cut].rstrip()
    return kept if kept else None


def strip_comments(file: SourceFile) -> SourceFile:
    """Remove comment content, deleting lines that become empty.

    MUMPS: text from the first unquoted ``;`` to end of line is dropped.
    ALC: full-line ``*`` comments and ``.*`` macro comments are deleted;
    trailing remarks after the operand field are kept (locating the remark
    split reliably would need full operand parsing).
    """
    kept: list[str] = []
    if file.language is Language.MUMPS:
        for record in file.lines:
            stripped = _strip_mumps_line(record.text)
            if stripped is not None:
                kept.append(stripped)
    else:
        for record in file.lines:
            if record.text.startswith("*") or record.text.startswith(".*"):
                continue
            kept.append(record.text)
    return _rebuild(file, kept)


def _id_stream(rng: random.Random, taken: set[str]) -> str:
    while True:
        candidate = "".join(rng.choices(ID_ALPHABET, k=ID_LENGTH))
        if candidate not in taken:
            taken.add(candidate)
            return candidate


def generate_ids(count: int, seed_material: str) -> list[str]:
    """Deterministic unique 8-char lowercase base-36 identifiers."""
    rng = random.Random(seed_material)
    taken: set[str] = set()
    return [_id_stream(rng, taken) for _ in range(count)]


def assign_line_ids(file: SourceFile, seed: int) -> SourceFile:
    """Tag every line with a unique id; pure in (file content, seed)."""
    ids = generate_ids(file.line_count, f"lines:{seed}:{file.byte_digest}")
    lines = tuple(
        replace(record, line_id=line_id) for record, line_id in zip(file.lines, ids)
    )
    return SourceFile(
        path=file.path,
        language=file.language,
        lines=lines,
        byte_digest=file.byte_digest,
        trailing_newline=file.trailing_newline,
    )


def marker_line(language: Language, marker_id: str) -> str:
    if language is Language.MUMPS:
        return f";<MODULE {marker_id}>"
    return f"* <MODULE {marker_id}>"


def marker_pattern(language: Language) -> re.Pattern[str]:
    return MUMPS_MARKER_RE if language is Language.MUMPS else ALC_MARKER_RE


def insert_module_markers(file: SourceFile, boundaries, seed: int = 0) -> SourceFile:
    """Insert one marker comment line immediately before each boundary start.

    Boundaries must be sorted, non-overlapping, and within file bounds; each
    must already carry a marker_id (see structure.assign_marker_ids).  The
    seed is used only to fill in ids for boundaries that lack one.
    """
    previous_end = -1
    for boundary in boundaries:
        if boundary.start_line <= previous_end:
            raise CorpusError(
                f"boundaries overlap or are unsorted near line {boundary.start_line}"
            )
        if boundary.start_line < 0 or boundary.end_line >= file.line_count:
            raise CorpusError(
                f"boundary [{boundary.start_line}, {boundary.end_line}] outside "
                f"file of {file.line_count} lines"
            )
        previous_end = boundary.end_line

    missing = sum(1 for b in boundaries if not b.marker_id)
    fallback = iter(generate_ids(missing, f"markers:{seed}:{file.byte_digest}"))
    starts = {
        b.start_line: (b.marker_id or next(fallback)) for b in boundaries
    }
    texts: list[str] = []
    for record in file.lines:
        if record.index in starts:
            texts.append(marker_line(file.language, starts[record.index]))
        texts.append(record.text)
    return _rebuild(file, texts)


def remove_module_markers(file: SourceFile) -> SourceFile:
    """Inverse of insert_module_markers."""
    pattern = marker_pattern(file.language)
    texts = [r.text for r in file.lines if not pattern.match(r.text)]
    return _rebuild(file, texts)


def to_prepared_json(file: SourceFile) -> dict:
    return {
        "path": file.path,
        "language": file.language.value,
        "digest": file.byte_digest,
        "trailing_newline": file.trailing_newline,
        "lines": [
            {"index": r.index, "id": r.line_id, "text": r.text} for r in file.lines
        ],
    }


def from_prepared_json(payload: dict) -> SourceFile:
    lines = tuple(
        LineRecord(index=row["index"], text=row["text"], line_id=row.get("id"))
        for row in payload["lines"]
    )
    file = SourceFile(
        path=payload["path"],
        language=Language(payload["language"]),
        lines=lines,
        byte_digest=payload["digest"],
        trailing_newline=payload.get("trailing_newline", True),
    )
    if content_digest(file.content) != file.byte_digest:
        raise CorpusError(f"prepared file {file.path} fails its digest check")
    if any(record.index != i for i, record in enumerate(file.lines)):
        raise CorpusError(f"prepared file {file.path} has non-contiguous line indices")
    return file
