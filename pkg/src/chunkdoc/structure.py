"""Structural module detection for MUMPS and IBM assembler source.

A "module" is a MUMPS labeled subroutine or an ALC CSECT/DSECT section.
Boundaries tile the file: every line belongs to exactly one boundary, with
anonymous preambles covering material before the first detected unit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from .corpus import Language, SourceFile, generate_ids

ANONYMOUS = "<anonymous>"

_MUMPS_LABEL_RE = re.compile(r"^([%A-Za-z][A-Za-z0-9]*|[0-9]+)")


class StructureError(Exception):
    pass


class BoundaryKind(str, Enum):
    SUBROUTINE = "Subroutine"
    CSECT = "Csect"
    DSECT = "Dsect"


@dataclass(frozen=True)
class ModuleBoundary:
    start_line: int
    end_line: int
    kind: BoundaryKind
    name: str
    marker_id: str = ""

    def __post_init__(self) -> None:
        if self.start_line > self.end_line:
            raise StructureError(
                f"boundary start {self.start_line} beyond end {self.end_line}"
            )

    @property
    def line_span(self) -> range:
        return range(self.start_line, self.end_line + 1)


def _close_boundaries(
    starts: list[tuple[int, BoundaryKind, str]], line_count: int
) -> list[ModuleBoundary]:
    boundaries = []
    for i, (start, kind, name) in enumerate(starts):
        end = starts[i + 1][0] - 1 if i + 1 < len(starts) else line_count - 1
        boundaries.append(ModuleBoundary(start, end, kind, name))
    return boundaries


def _is_mumps_label(text: str) -> bool:
    if not text:
        return False
    first = text[0]
    return first.isalnum() or first == "%"


def find_mumps_modules(file: SourceFile) -> list[ModuleBoundary]:
    """One boundary per labeled block: a label character in column 1 starts
    a new subroutine; dot-indented and whitespace-led lines never do."""
    if file.language is not Language.MUMPS:
        raise StructureError(f"expected MUMPS file, got {file.language}")
    if file.line_count == 0:
        return []
    starts: list[tuple[int, BoundaryKind, str]] = []
    for record in file.lines:
        if not _is_mumps_label(record.text):
            continue
        match = _MUMPS_LABEL_RE.match(record.text)
        name = match.group(1) if match else ANONYMOUS
        starts.append((record.index, BoundaryKind.SUBROUTINE, name))
    if not starts:
        starts = [(0, BoundaryKind.SUBROUTINE, ANONYMOUS)]
    elif starts[0][0] > 0:
        starts.insert(0, (0, BoundaryKind.SUBROUTINE, ANONYMOUS))
    return _close_boundaries(starts, file.line_count)


def _alc_operation(text: str) -> tuple[str | None, str]:
    """Return (operation field, name field) of one ALC statement line."""
    tokens = text.split()
    if not tokens:
        return None, ""
    if text[0] not in (" ", "\t"):
        # Name present in column 1; the operation is the second token.
        if len(tokens) < 2:
            return None, tokens[0]
        return tokens[1], tokens[0]
    return tokens[0], ""


def find_alc_modules(file: SourceFile) -> list[ModuleBoundary]:
    """One boundary per CSECT/DSECT statement, plus an anonymous preamble.

    Continuation lines (non-blank column 72 on the previous statement) are
    part of that statement and never start a boundary.
    """
    if file.language is not Language.ALC:
        raise StructureError(f"expected ALC file, got {file.language}")
    if file.line_count == 0:
        return []
    starts: list[tuple[int, BoundaryKind, str]] = []
    continuation = False
    for record in file.lines:
        text = record.text
        if not continuation:
            operation, name = _alc_operation(text)
            if operation is not None:
                upper = operation.upper()
                if upper in ("CSECT", "DSECT"):
                    kind = BoundaryKind.CSECT if upper == "CSECT" else BoundaryKind.DSECT
                    starts.append((record.index, kind, name or ANONYMOUS))
        continuation = len(text) >= 72 and text[71] not in (" ", "\t")
    if not starts:
        starts = [(0, BoundaryKind.CSECT, ANONYMOUS)]
    elif starts[0][0] > 0:
        starts.insert(0, (0, BoundaryKind.CSECT, ANONYMOUS))
    return _close_boundaries(starts, file.line_count)


def find_modules(file: SourceFile) -> list[ModuleBoundary]:
    if file.language is Language.MUMPS:
        return find_mumps_modules(file)
    return find_alc_modules(file)


def assign_marker_ids(
    boundaries: Sequence[ModuleBoundary], file: SourceFile, seed: int
) -> list[ModuleBoundary]:
    """Give every boundary a unique 8-char marker id, deterministically
    derived from (seed, file content)."""
    ids = generate_ids(len(boundaries), f"markers:{seed}:{file.byte_digest}")
    return [replace(b, marker_id=i) for b, i in zip(boundaries, ids)]


def boundaries_to_json(file: SourceFile, boundaries: Sequence[ModuleBoundary]) -> dict:
    return {
        "file": file.path,
        "file_digest": file.byte_digest,
        "boundaries": [
            {
                "start": b.start_line,
                "end": b.end_line,
                "kind": b.kind.value,
                "name": b.name,
                "marker_id": b.marker_id,
            }
            for b in boundaries
        ],
    }


def boundaries_from_json(payload: dict) -> list[ModuleBoundary]:
    return [
        ModuleBoundary(
            start_line=row["start"],
            end_line=row["end"],
            kind=BoundaryKind(row["kind"]),
            name=row["name"],
            marker_id=row.get("marker_id", ""),
        )
        for row in payload["boundaries"]
    ]
