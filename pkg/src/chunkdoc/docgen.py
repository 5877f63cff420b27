"""Module-level documentation generation.

Chunks carved from the marker-annotated file are sent to a generator model
that must answer with a JSON map of marker id to documentation string; the
strings are then merged back into the full file for judging, delimited by
``<BLOCK_COMMENT id>`` comment lines.
"""

from __future__ import annotations

import logging
from bisect import bisect_left
from dataclasses import dataclass
from typing import Sequence

from .chunking import ChunkMethod, Partition
from .corpus import ID_PATTERN, Language, SourceFile, TokenBudget, _rebuild, marker_pattern
from .llmgate import (
    ChatMessage,
    ChatRequest,
    Gateway,
    GatewayError,
    JsonExtractError,
    RequestTag,
    complete_json,
)
from .structure import ModuleBoundary

log = logging.getLogger(__name__)


class DocgenError(Exception):
    pass


@dataclass(frozen=True)
class GeneratedComment:
    marker_id: str
    text: str
    model_id: str
    method: ChunkMethod
    budget: TokenBudget
    chunk_ordinal: int


@dataclass(frozen=True)
class CommentSet:
    file_digest: str
    model_id: str
    method: ChunkMethod
    budget: TokenBudget
    comments: dict[str, GeneratedComment]
    missing: tuple[str, ...]
    failures: tuple[str, ...] = ()


@dataclass(frozen=True)
class AnnotatedChunk:
    """A chunk's text in marked-file coordinates, with the markers it holds."""

    ordinal: int
    start_line: int
    end_line: int
    text: str
    marker_ids: tuple[str, ...]


def map_split_to_marked(split: int, boundary_starts: Sequence[int]) -> int:
    """Translate a split index from plain-file to marked-file coordinates.

    Each marker is inserted just before its module start, so a split landing
    on a module start keeps the marker inside the new chunk.
    """
    return split + bisect_left(boundary_starts, split)


def annotate_chunks(
    marked: SourceFile,
    boundaries: Sequence[ModuleBoundary],
    partition: Partition,
) -> list[AnnotatedChunk]:
    """Carve the marker-annotated file along a partition of the plain file."""
    starts = [b.start_line for b in boundaries]
    marked_splits = [map_split_to_marked(s, starts) for s in partition.split_points]
    pattern = marker_pattern(marked.language)
    chunk_starts = [0, *marked_splits]
    chunks = []
    for ordinal, start in enumerate(chunk_starts):
        end = (
            chunk_starts[ordinal + 1] - 1
            if ordinal + 1 < len(chunk_starts)
            else marked.line_count - 1
        )
        texts = [r.text for r in marked.lines[start : end + 1]]
        marker_ids = []
        for text in texts:
            match = pattern.match(text)
            if match:
                marker_ids.append(match.group(1))
        chunks.append(
            AnnotatedChunk(
                ordinal=ordinal,
                start_line=start,
                end_line=end,
                text="\n".join(texts),
                marker_ids=tuple(marker_ids),
            )
        )
    return chunks


DOC_SYSTEM = (
    "You are a senior software engineer tasked with documenting {language} code."
)

DOC_TEMPLATE = """\
The {language} code provided below has commented tags delineating modules. \
These tags take the form `<MODULE #>`, where `#` takes the place of an \
8-character alphanumeric ID, and are associated with the code immediately \
below it.

You are to write explanatory documentation for each of these labeled \
modules. This documentation should summarize the intended functionality of \
the code, define any parameters or outputs, and describe any side-effects \
or exceptions that may arise in its execution. This documentation will be \
utilized by engineers to maintain and modernize the code, so it is vital \
that all the code's behavior is captured.

Your response should be formatted as a JSON object, where the keys are the \
alphanumeric IDs and the values are the documentation strings. Be sure to \
include entries for ALL placeholders present in the input. Do not provide \
any other commentary, do not write any code.

Please provide comments for the following code:
{source_code}"""

MISSING_RETRY_TEMPLATE = """\
Your response omitted documentation for these module IDs: {ids}.
Reply with a JSON object holding entries for ONLY those IDs."""


def build_doc_prompt(chunk_text: str, language: Language, model_id: str,
                     temperature: float = 0.2) -> ChatRequest:
    if "<MODULE " not in chunk_text:
        raise DocgenError("chunk holds no module markers; nothing to document")
    return ChatRequest(
        model_id=model_id,
        messages=(
            ChatMessage("system", DOC_SYSTEM.format(language=language.value)),
            ChatMessage("user", DOC_TEMPLATE.format(
                language=language.value, source_code=chunk_text)),
        ),
        temperature=temperature,
        tag=RequestTag.DOCGEN,
    )


def _parse_doc_payload(payload) -> dict[str, str]:
    if not isinstance(payload, dict):
        raise DocgenError(f"documentation payload must be a JSON object, got {type(payload)}")
    parsed = {}
    for key, value in payload.items():
        if isinstance(value, dict) and "text" in value:
            value = value["text"]
        parsed[str(key)] = str(value)
    return parsed


def generate_comments(
    chunks: Sequence[AnnotatedChunk],
    gateway: Gateway,
    language: Language,
    file_digest: str,
    model_id: str,
    method: ChunkMethod,
    budget: TokenBudget,
    temperature: float = 0.2,
) -> CommentSet:
    """Generate one documentation string per marker across a file's chunks.

    Marker-less chunks are skipped.  Unknown ids in a reply are dropped; ids
    the model never covered get one targeted re-query before landing in
    ``missing``.  Duplicate ids across chunks resolve to the chunk where the
    marker physically resides.
    """
    expected: dict[str, int] = {}
    for chunk in chunks:
        for marker_id in chunk.marker_ids:
            expected[marker_id] = chunk.ordinal

    comments: dict[str, GeneratedComment] = {}
    failures: list[str] = []
    any_success = False
    for chunk in chunks:
        if not chunk.marker_ids:
            log.info("chunk %d has no markers; skipped", chunk.ordinal)
            continue
        request = build_doc_prompt(chunk.text, language, model_id, temperature)
        try:
            payload, response = complete_json(gateway, request)
            replies = _parse_doc_payload(payload)
        except (GatewayError, DocgenError) as exc:
            failures.append(f"chunk {chunk.ordinal}: {exc}")
            continue
        any_success = True

        still_missing = [m for m in chunk.marker_ids if m not in replies]
        if still_missing:
            retry = ChatRequest(
                model_id=model_id,
                messages=request.messages
                + (
                    ChatMessage("assistant", response.text),
                    ChatMessage("user", MISSING_RETRY_TEMPLATE.format(
                        ids=", ".join(still_missing))),
                ),
                temperature=temperature,
                tag=RequestTag.DOCGEN,
            )
            try:
                payload, _ = complete_json(gateway, retry)
                replies.update(_parse_doc_payload(payload))
            except (GatewayError, DocgenError, JsonExtractError) as exc:
                log.warning("missing-id retry failed for chunk %d: %s", chunk.ordinal, exc)

        for marker_id, text in replies.items():
            home = expected.get(marker_id)
            if home is None:
                log.warning("dropping reply for unknown marker id %r", marker_id)
                continue
            if home != chunk.ordinal:
                # Only the chunk where the marker physically resides may
                # document it; cross-chunk replies are hallucinated.
                log.warning(
                    "dropping reply for marker %s from foreign chunk %d (home %d)",
                    marker_id, chunk.ordinal, home,
                )
                continue
            if not text:
                continue
            comments[marker_id] = GeneratedComment(
                marker_id=marker_id,
                text=text,
                model_id=model_id,
                method=method,
                budget=budget,
                chunk_ordinal=chunk.ordinal,
            )

    if chunks and any(c.marker_ids for c in chunks) and not any_success:
        raise DocgenError(f"every chunk failed: {failures}")
    missing = tuple(m for m in expected if m not in comments)
    return CommentSet(
        file_digest=file_digest,
        model_id=model_id,
        method=method,
        budget=budget,
        comments=comments,
        missing=missing,
        failures=tuple(failures),
    )


def comment_prefix(language: Language) -> str:
    return ";" if language is Language.MUMPS else "* "


def block_comment_delimiter(language: Language, marker_id: str) -> str:
    return f"{comment_prefix(language)}<BLOCK_COMMENT {marker_id}>"


BLOCK_COMMENT_ID_RE = ID_PATTERN  # ids embedded in <BLOCK_COMMENT id> tags


def merge_comments(file_with_markers: SourceFile, comment_set: CommentSet) -> SourceFile:
    """Insert each generated comment right after its marker line.

    The inserted block is one ``<BLOCK_COMMENT id>`` delimiter line plus the
    comment text, one comment-prefixed line per text line; markers without a
    generation are left untouched.
    """
    if comment_set.file_digest != file_with_markers.byte_digest:
        raise DocgenError(
            f"comment set digest {comment_set.file_digest[:12]} does not match "
            f"file {file_with_markers.byte_digest[:12]}"
        )
    pattern = marker_pattern(file_with_markers.language)
    prefix = comment_prefix(file_with_markers.language)
    texts: list[str] = []
    for record in file_with_markers.lines:
        texts.append(record.text)
        match = pattern.match(record.text)
        if not match:
            continue
        comment = comment_set.comments.get(match.group(1))
        if comment is None:
            continue
        texts.append(block_comment_delimiter(file_with_markers.language, comment.marker_id))
        texts.extend(f"{prefix}{line}" for line in comment.text.split("\n"))
    return _rebuild(file_with_markers, texts)


def comment_set_to_json(comment_set: CommentSet) -> dict:
    return {
        "file_digest": comment_set.file_digest,
        "model": comment_set.model_id,
        "method": comment_set.method.value,
        "budget": comment_set.budget.limit,
        "comments": {
            marker_id: {"text": comment.text, "chunk_ordinal": comment.chunk_ordinal}
            for marker_id, comment in sorted(comment_set.comments.items())
        },
        "missing": sorted(comment_set.missing),
        "failures": list(comment_set.failures),
    }


def comment_set_from_json(payload: dict) -> CommentSet:
    method = ChunkMethod(payload["method"])
    budget = TokenBudget(payload["budget"])
    comments = {
        marker_id: GeneratedComment(
            marker_id=marker_id,
            text=row["text"],
            model_id=payload["model"],
            method=method,
            budget=budget,
            chunk_ordinal=row.get("chunk_ordinal", 0),
        )
        for marker_id, row in payload["comments"].items()
    }
    return CommentSet(
        file_digest=payload["file_digest"],
        model_id=payload["model"],
        method=method,
        budget=budget,
        comments=comments,
        missing=tuple(payload.get("missing", ())),
        failures=tuple(payload.get("failures", ())),
    )
