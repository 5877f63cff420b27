"""The six partitioning strategies and chunk materialization.

A partition is a set of split points (line indices where a new chunk
starts; line 0 is an implicit chunk start and is never listed).  Chunks are
the contiguous line ranges between consecutive split points, token-counted
against the partition's budget.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .corpus import (
    DEFAULT_BUDGETS,
    UNLIMITED,
    SourceFile,
    TokenBudget,
    TokenCounter,
)
from .llmgate import (
    ChatMessage,
    ChatRequest,
    Gateway,
    GatewayError,
    RequestTag,
    complete_json,
)
from .structure import ModuleBoundary

log = logging.getLogger(__name__)


class ChunkingError(Exception):
    pass


class ChunkMethod(str, Enum):
    FULL_FILE = "FullFile"
    FIXED_LENGTH = "FixedLength"
    SINGLE_MODULE = "SingleModule"
    MULTIPLE_MODULES = "MultipleModules"
    HUMAN_PARTITIONS = "HumanPartitions"
    LLM_PARTITIONS = "LlmPartitions"


@dataclass(frozen=True)
class Partition:
    file_digest: str
    method: ChunkMethod
    budget: TokenBudget
    split_points: tuple[int, ...]
    explanations: dict[int, str] = field(default_factory=dict)
    fallback_forced_splits: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        previous = 0
        for point in self.split_points:
            if point <= previous:
                raise ChunkingError(
                    f"split points must be strictly increasing and > 0, got "
                    f"{self.split_points}"
                )
            previous = point

    @property
    def label(self) -> str:
        return variant_label(self.method, self.budget)


@dataclass(frozen=True)
class Chunk:
    file_digest: str
    ordinal: int
    start_line: int
    end_line: int
    token_count: int
    oversize: bool


def variant_label(method: ChunkMethod, budget: TokenBudget) -> str:
    if budget.is_finite:
        return f"{method.value}_{budget.limit}"
    return f"{method.value}_unlimited" if method is ChunkMethod.LLM_PARTITIONS else method.value


def variant_grid(budgets: Sequence[int] = DEFAULT_BUDGETS) -> list[tuple[ChunkMethod, TokenBudget]]:
    """The 16 legal (method, budget) combinations."""
    finite = [TokenBudget.finite(b) for b in budgets]
    grid: list[tuple[ChunkMethod, TokenBudget]] = [
        (ChunkMethod.FULL_FILE, UNLIMITED),
        (ChunkMethod.SINGLE_MODULE, UNLIMITED),
        (ChunkMethod.HUMAN_PARTITIONS, UNLIMITED),
    ]
    grid += [(ChunkMethod.FIXED_LENGTH, b) for b in finite]
    grid += [(ChunkMethod.MULTIPLE_MODULES, b) for b in finite]
    grid += [(ChunkMethod.LLM_PARTITIONS, b) for b in finite]
    grid.append((ChunkMethod.LLM_PARTITIONS, UNLIMITED))
    return grid


def validate_split_points(split_points: Sequence[int], line_count: int) -> None:
    previous = 0
    for point in split_points:
        if not isinstance(point, int) or point <= previous or point >= line_count:
            raise ChunkingError(
                f"split point {point} invalid for a {line_count}-line file "
                f"(must be strictly increasing within (0, {line_count}))"
            )
        previous = point


def check_tiling(boundaries: Sequence[ModuleBoundary], line_count: int) -> None:
    if not boundaries:
        raise ChunkingError("boundary list is empty")
    if boundaries[0].start_line != 0:
        raise ChunkingError("first boundary must start at line 0")
    for before, after in zip(boundaries, boundaries[1:]):
        if after.start_line != before.end_line + 1:
            raise ChunkingError(
                f"boundaries do not tile: gap/overlap between line "
                f"{before.end_line} and {after.start_line}"
            )
    if boundaries[-1].end_line != line_count - 1:
        raise ChunkingError("last boundary must end at the last line")


def _range_text(file: SourceFile, start: int, end: int) -> str:
    return "\n".join(record.text for record in file.lines[start : end + 1])


def partition_to_chunks(
    file: SourceFile, partition: Partition, counter: TokenCounter
) -> list[Chunk]:
    """Materialize a partition as contiguous token-counted chunks."""
    if partition.file_digest != file.byte_digest:
        raise ChunkingError(
            f"partition digest {partition.file_digest[:12]} does not match file "
            f"{file.byte_digest[:12]}"
        )
    validate_split_points(partition.split_points, file.line_count)
    if file.line_count == 0:
        return []
    starts = [0, *partition.split_points]
    chunks = []
    for ordinal, start in enumerate(starts):
        end = starts[ordinal + 1] - 1 if ordinal + 1 < len(starts) else file.line_count - 1
        tokens = counter.count(_range_text(file, start, end))
        chunks.append(
            Chunk(
                file_digest=file.byte_digest,
                ordinal=ordinal,
                start_line=start,
                end_line=end,
                token_count=tokens,
                oversize=partition.budget.exceeded_by(tokens),
            )
        )
    return chunks


def chunk_full_file(file: SourceFile) -> Partition:
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.FULL_FILE,
        budget=UNLIMITED,
        split_points=(),
    )


def chunk_fixed_length(
    file: SourceFile, counter: TokenCounter, budget: TokenBudget
) -> Partition:
    """Greedy line accumulation: a line that would push the joined chunk text
    over the budget starts the next chunk; a lone over-budget line stands as
    its own chunk."""
    if not budget.is_finite:
        raise ChunkingError("fixed-length chunking requires a finite budget")
    splits: list[int] = []
    current: list[str] = []
    for record in file.lines:
        if not current:
            current = [record.text]
            continue
        if counter.count("\n".join(current) + "\n" + record.text) <= budget.limit:
            current.append(record.text)
        else:
            splits.append(record.index)
            current = [record.text]
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.FIXED_LENGTH,
        budget=budget,
        split_points=tuple(splits),
    )


def chunk_single_module(file: SourceFile, boundaries: Sequence[ModuleBoundary]) -> Partition:
    check_tiling(boundaries, file.line_count)
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.SINGLE_MODULE,
        budget=UNLIMITED,
        split_points=tuple(b.start_line for b in boundaries[1:]),
    )


def chunk_multiple_modules(
    file: SourceFile,
    boundaries: Sequence[ModuleBoundary],
    counter: TokenCounter,
    budget: TokenBudget,
) -> Partition:
    """Merge adjacent modules left to right while the joined text stays
    within budget; a lone over-budget module is kept whole (oversize)."""
    if not budget.is_finite:
        raise ChunkingError("multiple-modules chunking requires a finite budget")
    check_tiling(boundaries, file.line_count)
    splits: list[int] = []
    current_start = boundaries[0].start_line
    for boundary in boundaries[1:]:
        merged = _range_text(file, current_start, boundary.end_line)
        if counter.count(merged) <= budget.limit:
            continue
        splits.append(boundary.start_line)
        current_start = boundary.start_line
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.MULTIPLE_MODULES,
        budget=budget,
        split_points=tuple(splits),
    )


def load_human_partition(file: SourceFile, payload: dict) -> Partition:
    """Validate an externally authored split-point file against this file.

    Accepts ``split_line_ids`` (robust to reordering of artifacts) or raw
    ``split_points`` indices; both are checked against the file digest.
    """
    digest = payload.get("file_digest")
    if digest != file.byte_digest:
        raise ChunkingError(
            f"human partition digest {str(digest)[:12]} does not match file "
            f"{file.byte_digest[:12]}"
        )
    if "split_line_ids" in payload:
        id_map = file.id_to_index()
        points = []
        for line_id in payload["split_line_ids"]:
            if line_id not in id_map:
                raise ChunkingError(f"unknown line id {line_id!r} in human partition")
            points.append(id_map[line_id])
    elif "split_points" in payload:
        points = list(payload["split_points"])
    else:
        raise ChunkingError("human partition needs split_line_ids or split_points")
    validate_split_points(points, file.line_count)
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.HUMAN_PARTITIONS,
        budget=UNLIMITED,
        split_points=tuple(points),
    )


PARTITION_EXAMPLE_INPUT = """\
k3x9w2ab def fibonacci(n):
p0q8r7cd     if n < 2:
m1n5t6ef         return n
z4y3x2gh     return fibonacci(n - 1) + fibonacci(n - 2)
a9b8c7ij
d6e5f4kl def main():
g3h2i1mn     print(fibonacci(10))"""

PARTITION_EXAMPLE_OUTPUT = """\
{"partitions": [{"explanation": "The program entry point begins here, \
separate from the recursive helper above it.", "line_id": "d6e5f4kl"}]}"""

PARTITION_SYSTEM = (
    "Your purpose is to partition {language} code into self-contained logical blocks."
)

PARTITION_TEMPLATE = """\
Partition the {language} code into logical blocks. Each block should be \
relatively self-contained and ideally constitute a complete "subroutine", \
including any associated comments. These breakpoints should usually be \
inserted between labeled blocks, but perhaps not between *every* labeled \
block (depending on things like fallthrough).

INPUT FORMAT:
Each line of code has been prepended with an 8-character unique ID. A Python \
example would look like this:
{example_input}

And your output might look like this:
{example_output}

You are to output a JSON object containing a subset of these IDs, \
corresponding to the lines that should start a new block. Each partition \
should be paired with an explanation (please output the explanation first, \
before giving the line ID).

Input:
{source_code}"""


def render_lines_with_ids(file: SourceFile) -> str:
    missing = [r.index for r in file.lines if r.line_id is None]
    if missing:
        raise ChunkingError(f"lines {missing[:5]} have no line ids; run assign_line_ids")
    return "\n".join(f"{r.line_id} {r.text}" for r in file.lines)


def build_partition_request(
    file: SourceFile, model_id: str, temperature: float = 0.2
) -> ChatRequest:
    prompt = PARTITION_TEMPLATE.format(
        language=file.language.value,
        example_input=PARTITION_EXAMPLE_INPUT,
        example_output=PARTITION_EXAMPLE_OUTPUT,
        source_code=render_lines_with_ids(file),
    )
    return ChatRequest(
        model_id=model_id,
        messages=(
            ChatMessage("system", PARTITION_SYSTEM.format(language=file.language.value)),
            ChatMessage("user", prompt),
        ),
        temperature=temperature,
        tag=RequestTag.PARTITION,
    )


def _iter_id_entries(payload) -> list[tuple[str, str]]:
    """Normalize the model's partition payload to (line_id, explanation)."""
    if isinstance(payload, dict):
        for key in ("partitions", "blocks", "splits"):
            if key in payload and isinstance(payload[key], list):
                payload = payload[key]
                break
        else:
            return [(str(k), str(v)) for k, v in payload.items()]
    if not isinstance(payload, list):
        raise ChunkingError(f"unsupported partition payload shape: {type(payload)}")
    entries = []
    for item in payload:
        if isinstance(item, str):
            entries.append((item, ""))
        elif isinstance(item, dict) and "line_id" in item:
            entries.append((str(item["line_id"]), str(item.get("explanation", ""))))
    return entries


def parse_partition_response(
    payload, file: SourceFile
) -> tuple[list[int], dict[int, str], int]:
    """Map returned line ids to split indices.

    Unknown ids are dropped (counted); an id naming line 0 is the implicit
    chunk start and is ignored.  Raises when every returned id was invalid.
    """
    entries = _iter_id_entries(payload)
    id_map = file.id_to_index()
    points: dict[int, str] = {}
    invalid = 0
    for line_id, explanation in entries:
        index = id_map.get(line_id)
        if index is None and explanation in id_map:
            # Tolerate replies that put the explanation on the key side.
            index, explanation = id_map[explanation], line_id
        if index is None:
            invalid += 1
            continue
        if index == 0:
            continue
        points[index] = explanation
    if entries and invalid == len(entries):
        raise ChunkingError("model returned no usable line ids")
    ordered = sorted(points)
    return ordered, {i: points[i] for i in ordered if points[i]}, invalid


REQUERY_TEMPLATE = """\
Revision round {round} of {max_rounds}: some blocks in your partitioning \
exceed the {limit}-token limit.

Your previous partitioning started new blocks at these lines:
{previous}

These blocks are over the limit:
{oversize}

Revise the partitioning to shorten those blocks by adding split points \
inside them. Keep the same output format: a JSON object pairing each \
explanation with the line ID that should start a new block."""


def _describe_oversize(
    file: SourceFile, chunks: Sequence[Chunk], budget: TokenBudget
) -> str:
    rows = []
    for chunk in chunks:
        ratio = chunk.token_count / budget.limit
        start_id = file.lines[chunk.start_line].line_id
        rows.append(
            f"- block starting at line ID {start_id} (lines "
            f"{chunk.start_line}-{chunk.end_line}): {chunk.token_count} tokens, "
            f"{ratio:.4f}x the limit"
        )
    return "\n".join(rows)


def _describe_splits(file: SourceFile, split_points: Sequence[int]) -> str:
    if not split_points:
        return "- (no split points: the whole file was one block)"
    return "\n".join(f"- line ID {file.lines[p].line_id} (line {p})" for p in split_points)


def _force_split_oversize(
    file: SourceFile,
    split_points: Sequence[int],
    counter: TokenCounter,
    budget: TokenBudget,
) -> list[int]:
    """Mechanical fixed-length splits inside any chunk still over budget."""
    probe = Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.LLM_PARTITIONS,
        budget=budget,
        split_points=tuple(split_points),
    )
    forced: list[int] = []
    for chunk in partition_to_chunks(file, probe, counter):
        if not chunk.oversize:
            continue
        sub: list[str] = []
        for index in range(chunk.start_line, chunk.end_line + 1):
            text = file.lines[index].text
            if not sub:
                sub = [text]
                continue
            if counter.count("\n".join(sub) + "\n" + text) <= budget.limit:
                sub.append(text)
            else:
                forced.append(index)
                sub = [text]
    return forced


def llm_partition(
    file: SourceFile,
    gateway: Gateway,
    counter: TokenCounter,
    budget: TokenBudget,
    model_id: str,
    max_rounds: int = 3,
    temperature: float = 0.2,
) -> Partition:
    """Model-driven partitioning with the over-limit re-query protocol.

    The model sees the file with per-line ids and proposes split ids.  While
    any resulting chunk exceeds a finite budget, it is re-queried with its
    previous answer, the oversize chunk descriptors, and each chunk's
    token/limit ratio, up to ``max_rounds`` times; whatever is still over
    budget afterwards is force-split mechanically and recorded.
    """
    initial = build_partition_request(file, model_id, temperature)
    payload, response = complete_json(gateway, initial)
    split_points, explanations, invalid = parse_partition_response(payload, file)
    if invalid:
        log.warning("%s: dropped %d unknown line ids from partition reply", file.path, invalid)

    rounds_used = 0
    if budget.is_finite:
        for round_number in range(1, max_rounds + 1):
            probe = Partition(
                file_digest=file.byte_digest,
                method=ChunkMethod.LLM_PARTITIONS,
                budget=budget,
                split_points=tuple(split_points),
            )
            oversize = [
                c for c in partition_to_chunks(file, probe, counter) if c.oversize
            ]
            if not oversize:
                break
            rounds_used = round_number
            correction = REQUERY_TEMPLATE.format(
                round=round_number,
                max_rounds=max_rounds,
                limit=budget.limit,
                previous=_describe_splits(file, split_points),
                oversize=_describe_oversize(file, oversize, budget),
            )
            requery = ChatRequest(
                model_id=model_id,
                messages=initial.messages
                + (
                    ChatMessage("assistant", response.text),
                    ChatMessage("user", correction),
                ),
                temperature=temperature,
                tag=RequestTag.PARTITION,
            )
            try:
                payload, response = complete_json(gateway, requery)
                split_points, explanations, _ = parse_partition_response(payload, file)
            except (GatewayError, ChunkingError) as exc:
                log.warning("%s: re-query round %d failed (%s)", file.path, round_number, exc)
                break

    forced: list[int] = []
    if budget.is_finite:
        forced = _force_split_oversize(file, split_points, counter, budget)
        if forced:
            log.info(
                "%s: force-split %d oversize chunk boundaries after %d re-query rounds",
                file.path,
                len(forced),
                rounds_used,
            )
    merged = sorted(set(split_points) | set(forced))
    return Partition(
        file_digest=file.byte_digest,
        method=ChunkMethod.LLM_PARTITIONS,
        budget=budget,
        split_points=tuple(merged),
        explanations=explanations,
        fallback_forced_splits=tuple(sorted(forced)),
    )


def generate_variants(
    file: SourceFile,
    boundaries: Sequence[ModuleBoundary],
    human_partition: Partition | None,
    gateway: Gateway,
    counter: TokenCounter,
    model_id: str,
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    max_rounds: int = 3,
    temperature: float = 0.2,
) -> list[Partition]:
    """All 16 partition variants for one file (15 when no human partition)."""
    finite = [TokenBudget.finite(b) for b in budgets]
    variants = [chunk_full_file(file), chunk_single_module(file, boundaries)]
    if human_partition is not None:
        variants.append(human_partition)
    variants += [chunk_fixed_length(file, counter, b) for b in finite]
    variants += [chunk_multiple_modules(file, boundaries, counter, b) for b in finite]
    variants += [
        llm_partition(file, gateway, counter, b, model_id, max_rounds, temperature)
        for b in finite
    ]
    variants.append(
        llm_partition(file, gateway, counter, UNLIMITED, model_id, max_rounds, temperature)
    )
    return variants


def partition_to_json(partition: Partition) -> dict:
    return {
        "file_digest": partition.file_digest,
        "method": partition.method.value,
        "budget": partition.budget.limit,
        "split_points": list(partition.split_points),
        "explanations": {str(k): v for k, v in partition.explanations.items()},
        "fallback_forced_splits": list(partition.fallback_forced_splits),
    }


def partition_from_json(payload: dict) -> Partition:
    return Partition(
        file_digest=payload["file_digest"],
        method=ChunkMethod(payload["method"]),
        budget=TokenBudget(payload["budget"]),
        split_points=tuple(payload["split_points"]),
        explanations={int(k): v for k, v in payload.get("explanations", {}).items()},
        fallback_forced_splits=tuple(payload.get("fallback_forced_splits", ())),
    )


def chunks_to_json(chunks: Sequence[Chunk]) -> list[dict]:
    return [
        {
            "ordinal": c.ordinal,
            "start": c.start_line,
            "end": c.end_line,
            "tokens": c.token_count,
            "oversize": c.oversize,
        }
        for c in chunks
    ]
