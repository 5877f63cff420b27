"""Deterministic scripted behaviors for the mock provider.

These let the full pipeline run offline: the partitioner proposes module
starts by re-parsing the code embedded in the prompt, the generator answers
with templated docstrings for every marker tag it sees, and the judge emits
seeded pseudo-random scores that are stable across runs.
"""

from __future__ import annotations

import hashlib
import json
import re

from .corpus import Language, file_from_content
from .llmgate import ChatRequest, MockProvider, RequestTag
from .structure import find_modules

_ID_LINE_RE = re.compile(r"^([a-z0-9]{8})(?: (.*))?$")
_MODULE_TAG_RE = re.compile(r"<MODULE ([a-z0-9]{8})>")
_JUDGE_IDS_RE = re.compile(r"Evaluate ONLY the comments with these IDs: ([^.\n]+)\.")

JUDGE_METRICS = ("completeness", "hallucination", "readability", "usefulness")


def _request_language(request: ChatRequest) -> Language:
    # The system sentence names the language; the embedded code might too.
    text = request.messages[0].content
    return Language.MUMPS if "MUMPS" in text else Language.ALC


def _embedded_source(request: ChatRequest) -> tuple[list[str], list[str]]:
    """Recover (line_ids, line_texts) from a partition prompt's Input block."""
    text = request.messages[1].content
    marker = "\nInput:\n"
    block = text[text.rfind(marker) + len(marker) :]
    ids, texts = [], []
    for line in block.split("\n"):
        match = _ID_LINE_RE.match(line)
        if not match:
            continue
        ids.append(match.group(1))
        texts.append(match.group(2) or "")
    return ids, texts


def module_starts_partitioner(request: ChatRequest) -> str:
    """Propose a split at the start of every detected structural module."""
    language = _request_language(request)
    ids, texts = _embedded_source(request)
    file = file_from_content("\n".join(texts), language)
    boundaries = find_modules(file)
    partitions = [
        {
            "explanation": f"A new {boundaries[i].kind.value} unit named "
            f"{boundaries[i].name} begins here.",
            "line_id": ids[boundaries[i].start_line],
        }
        for i in range(len(boundaries))
        if boundaries[i].start_line > 0
    ]
    return json.dumps({"partitions": partitions})


def template_generator(request: ChatRequest) -> str:
    """Answer every marker tag visible in the prompt with a templated docstring."""
    seen: dict[str, str] = {}
    for marker_id in _MODULE_TAG_RE.findall(request.joined_text()):
        seen[marker_id] = (
            f"Module {marker_id}: summarizes the block that follows.\n"
            "Inputs, outputs, and side effects are noted for maintainers."
        )
    return json.dumps(seen)


def _hash_int(material: str, modulus: int) -> int:
    digest = hashlib.sha256(material.encode()).digest()
    return int.from_bytes(digest[:4], "big") % modulus


def _seeded_score(seed: int, comment_id: str, metric: str, iteration: int) -> int:
    # A stable per-comment level plus small per-iteration jitter, so repeated
    # evaluations agree strongly (high ICC) without being constant.
    base = 40 + _hash_int(f"{seed}:{comment_id}:{metric}", 46)
    jitter = _hash_int(f"{seed}:{comment_id}:{metric}:{iteration}", 11) - 5
    return max(0, min(100, base + jitter))


def seeded_judge(request: ChatRequest, seed: int = 1234) -> str:
    """Emit stable pseudo-random rubric scores for the instructed ids."""
    match = _JUDGE_IDS_RE.search(request.joined_text())
    if not match:
        return "[]"
    ids = [part.strip() for part in match.group(1).split(",") if part.strip()]
    rows = []
    for comment_id in ids:
        row = {"comment_id": comment_id}
        for metric in JUDGE_METRICS:
            row[metric] = {
                "reasoning": f"Deterministic mock rating of {comment_id}.",
                "score": _seeded_score(seed, comment_id, metric, request.repetition_index),
            }
        rows.append(row)
    return json.dumps(rows)


def constant_judge(score: int):
    """Judge behavior that rates every metric of every comment ``score``."""

    def handler(request: ChatRequest) -> str:
        match = _JUDGE_IDS_RE.search(request.joined_text())
        ids = [p.strip() for p in match.group(1).split(",")] if match else []
        return json.dumps(
            [
                {
                    "comment_id": cid,
                    **{
                        metric: {"reasoning": "constant", "score": score}
                        for metric in JUDGE_METRICS
                    },
                }
                for cid in ids
            ]
        )

    return handler


def standard_mock_provider(judge_seed: int = 1234) -> MockProvider:
    """Route each request tag to its scripted behavior."""

    def handler(request: ChatRequest) -> str:
        if request.tag is RequestTag.PARTITION:
            return module_starts_partitioner(request)
        if request.tag is RequestTag.DOCGEN:
            return template_generator(request)
        return seeded_judge(request, seed=judge_seed)

    return MockProvider(handler=handler)
