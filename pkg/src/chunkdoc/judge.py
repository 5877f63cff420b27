"""Rubric-based evaluation of generated comments.

Comments are graded in file order, five per request, on four 0-100 metrics
(completeness, hallucination, readability, usefulness; higher is always
better, including hallucination where a high score means few
hallucinations).  Every comment is judged ``coverage`` independent times
and the per-metric means form its verdict.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .corpus import Language, SourceFile, TokenCounter
from .llmgate import (
    ChatMessage,
    ChatRequest,
    Gateway,
    GatewayError,
    JsonExtractError,
    RequestTag,
    complete_json,
)

log = logging.getLogger(__name__)

METRICS = ("completeness", "hallucination", "readability", "usefulness")

DEFAULT_WINDOW_SIZE = 5

# Merge only ever emits BLOCK_COMMENT, but inline-delimited comments are
# accepted here so externally produced files still judge cleanly.
_BLOCK_COMMENT_RE = re.compile(r"<(?:BLOCK|INLINE)_COMMENT ([a-z0-9]{8})>")


class JudgeError(Exception):
    pass


@dataclass(frozen=True)
class MetricScore:
    reasoning: str
    score: int


@dataclass(frozen=True)
class ScoreRecord:
    comment_id: str
    iteration: int
    judge_model: str
    scores: dict[str, MetricScore]


@dataclass(frozen=True)
class CommentVerdict:
    comment_id: str
    means: dict[str, float]
    iteration_count: int


@dataclass(frozen=True)
class JudgeWindow:
    ordinal: int
    comment_ids: tuple[str, ...]
    file_text: str
    language: Language
    truncated: bool = False


def _comment_ids_in_order(file_text: str) -> list[str]:
    return _BLOCK_COMMENT_RE.findall(file_text)


def build_windows(
    commented_file: SourceFile,
    window_size: int = DEFAULT_WINDOW_SIZE,
    counter: TokenCounter | None = None,
    max_context_tokens: int | None = None,
) -> list[JudgeWindow]:
    """Group the file's comments into consecutive windows of ``window_size``.

    Every comment lands in exactly one window; the last window may hold
    fewer.  When the file exceeds ``max_context_tokens`` the prompt text is
    trimmed to the window's comment span plus symmetric surrounding context,
    and the trim is flagged.
    """
    if window_size < 1:
        raise JudgeError("window size must be >= 1")
    text = commented_file.body
    ids = _comment_ids_in_order(text)
    if not ids:
        raise JudgeError(f"{commented_file.path} holds no <BLOCK_COMMENT> delimiters")
    windows = []
    for ordinal, start in enumerate(range(0, len(ids), window_size)):
        window_ids = tuple(ids[start : start + window_size])
        window_text, truncated = _window_text(
            commented_file, window_ids, counter, max_context_tokens
        )
        if truncated:
            log.info(
                "%s: window %d context truncated to fit %d tokens",
                commented_file.path,
                ordinal,
                max_context_tokens,
            )
        windows.append(
            JudgeWindow(
                ordinal=ordinal,
                comment_ids=window_ids,
                file_text=window_text,
                language=commented_file.language,
                truncated=truncated,
            )
        )
    return windows


def _window_text(
    file: SourceFile,
    window_ids: tuple[str, ...],
    counter: TokenCounter | None,
    max_context_tokens: int | None,
) -> tuple[str, bool]:
    text = file.body
    if counter is None or max_context_tokens is None:
        return text, False
    if counter.count(text) <= max_context_tokens:
        return text, False
    # Keep the lines spanning this window's comments, then grow the context
    # symmetrically while it still fits.
    lines = file.line_texts()
    hits = [
        i
        for i, line in enumerate(lines)
        if (m := _BLOCK_COMMENT_RE.search(line)) and m.group(1) in window_ids
    ]
    lo, hi = min(hits), max(hits)
    while True:
        grown_lo, grown_hi = max(0, lo - 1), min(len(lines) - 1, hi + 1)
        if (grown_lo, grown_hi) == (lo, hi):
            break
        candidate = "\n".join(lines[grown_lo : grown_hi + 1])
        if counter.count(candidate) > max_context_tokens:
            break
        lo, hi = grown_lo, grown_hi
    return "\n".join(lines[lo : hi + 1]), True


JUDGE_SYSTEM = (
    "You are a software quality engineer, your job is to evaluate comments "
    "in code according to a rubric."
)

JUDGE_EXAMPLE_OUTPUT = """\
[
  {"comment_id": "a1b2c3d4",
   "completeness": {"reasoning": "Covers the validation and the update path but not the error exit.", "score": 62},
   "hallucination": {"reasoning": "Everything stated matches the code.", "score": 88},
   "readability": {"reasoning": "Short, plain sentences.", "score": 74},
   "usefulness": {"reasoning": "Explains intent a maintainer could not guess from the code alone.", "score": 70}},
  {"comment_id": "e5f6a7b8",
   "completeness": {"reasoning": "Mentions only one of the three branches.", "score": 35},
   "hallucination": {"reasoning": "Claims a lock is taken; no lock exists here.", "score": 20},
   "readability": {"reasoning": "One run-on sentence.", "score": 45},
   "usefulness": {"reasoning": "Too vague to help.", "score": 28}},
  {"comment_id": "c9d0e1f2",
   "completeness": {"reasoning": "Covers inputs, outputs, and the failure path.", "score": 81},
   "hallucination": {"reasoning": "Accurate throughout.", "score": 90},
   "readability": {"reasoning": "Well structured.", "score": 83},
   "usefulness": {"reasoning": "Documents the unit conversion trap.", "score": 84}}
]"""

JUDGE_TEMPLATE = """\
Please evaluate each comment in the provided {language} code based on the \
following criteria:
Completeness - Does the comment address all capabilities of the relevant \
source code? Are significant considerations or functionality omitted?
Hallucination - Does the comment provide true information? Does the \
description accurately describe code behavior?
Readability - Is the comment clear to read? Is it formatted or phrased in a \
confusing way?
Usefulness - Is the comment useful? Would it aid a maintainer in \
understanding the code's functionality, or does it simply "state the \
obvious" with no added insight?

Look through the code and find each individual comment, they will be \
deliniated by <BLOCK_COMMENT id> or <INLINE_COMMENT id> where "id" is an \
8-character UUID for the comment that follows.

Evaluate ONLY the comments with these IDs: {ids}.

Each comment should be evaluated independently based on the above criteria. \
Your response should be formatted as a list of JSON objects, with each \
object corresponding to one comment. Each object should include five keys: \
`comment_id`, `completeness`, `hallucination`, `readability`, and \
`usefulness`. `comment_id` should have a string value that holds the \
8-character UUID associated with the comment. The other four values should \
each be a JSON object with two keys: `reasoning` (a clear explanation of \
why the criteria is rated the way it is) and `score` (an integer grade from \
0 to 100).

Be discerning in your evaluation; only very high-quality comments should be \
graded at 80 or higher, and 100s should be reserved for exceptionally \
illuminating documentation. Be a hard grader! If a comment is rated low, be \
thorough and detailed in your explanation of your score, so that the \
developer can improve in the future.

Below is an example output for a snippet of code with three labeled comments:
{example_output}

Evaluate the following code:
{source_code}

Don't forget to include your final scores in JSON format!"""


def build_judge_request(
    window: JudgeWindow,
    judge_model: str,
    iteration: int,
    temperature: float = 0.7,
) -> ChatRequest:
    prompt = JUDGE_TEMPLATE.format(
        language=window.language.value,
        ids=", ".join(window.comment_ids),
        example_output=JUDGE_EXAMPLE_OUTPUT,
        source_code=window.file_text,
    )
    return ChatRequest(
        model_id=judge_model,
        messages=(
            ChatMessage("system", JUDGE_SYSTEM),
            ChatMessage("user", prompt),
        ),
        temperature=temperature,
        tag=RequestTag.JUDGE,
        repetition_index=iteration,
    )


def _parse_score_items(payload, window: JudgeWindow, iteration: int,
                       judge_model: str) -> tuple[list[ScoreRecord], list[str]]:
    """Split a judge reply into valid records and the ids needing re-query."""
    if isinstance(payload, dict):
        payload = payload.get("evaluations", payload.get("comments", [payload]))
    if not isinstance(payload, list):
        return [], list(window.comment_ids)
    records = []
    seen: set[str] = set()
    for item in payload:
        if not isinstance(item, dict):
            continue
        comment_id = str(item.get("comment_id", ""))
        if comment_id not in window.comment_ids or comment_id in seen:
            continue
        scores: dict[str, MetricScore] = {}
        for metric in METRICS:
            cell = item.get(metric)
            if isinstance(cell, dict):
                reasoning = str(cell.get("reasoning", ""))
                raw = cell.get("score")
            else:
                reasoning, raw = "", cell
            if not isinstance(raw, int) or isinstance(raw, bool) or not 0 <= raw <= 100:
                break
            scores[metric] = MetricScore(reasoning=reasoning, score=raw)
        if len(scores) != len(METRICS):
            continue  # missing metric or out-of-range score: rejected
        seen.add(comment_id)
        records.append(
            ScoreRecord(
                comment_id=comment_id,
                iteration=iteration,
                judge_model=judge_model,
                scores=scores,
            )
        )
    rejected = [cid for cid in window.comment_ids if cid not in seen]
    return records, rejected


REJECTED_RETRY_TEMPLATE = """\
These comment IDs were missing from your reply or carried invalid scores \
(each metric needs an integer score from 0 to 100): {ids}.
Reply with a JSON list of evaluation objects for ONLY those IDs."""


def judge_window(
    window: JudgeWindow,
    gateway: Gateway,
    iteration: int,
    judge_model: str,
    temperature: float = 0.7,
) -> list[ScoreRecord]:
    """One judging pass over one window.

    Records with missing metrics or out-of-range scores are re-queried once,
    then dropped with a log entry.
    """
    if not window.comment_ids:
        raise JudgeError("window holds no comment ids")
    request = build_judge_request(window, judge_model, iteration, temperature)
    payload, response = complete_json(gateway, request)
    records, rejected = _parse_score_items(payload, window, iteration, judge_model)
    if rejected:
        retry = ChatRequest(
            model_id=judge_model,
            messages=request.messages
            + (
                ChatMessage("assistant", response.text),
                ChatMessage("user", REJECTED_RETRY_TEMPLATE.format(ids=", ".join(rejected))),
            ),
            temperature=temperature,
            tag=RequestTag.JUDGE,
            repetition_index=iteration,
        )
        try:
            payload, _ = complete_json(gateway, retry)
            retried, _ = _parse_score_items(payload, window, iteration, judge_model)
            have = {r.comment_id for r in records}
            records += [r for r in retried if r.comment_id not in have]
        except (GatewayError, JsonExtractError) as exc:
            log.warning("judge re-query failed: %s", exc)
        scored = {r.comment_id for r in records}
        still_rejected = [cid for cid in window.comment_ids if cid not in scored]
        if still_rejected:
            log.warning(
                "dropping %d unscorable comments in iteration %d: %s",
                len(still_rejected),
                iteration,
                ", ".join(still_rejected),
            )
    records.sort(key=lambda r: window.comment_ids.index(r.comment_id))
    return records


def aggregate(records: Sequence[ScoreRecord], coverage: int) -> list[CommentVerdict]:
    """Per-comment, per-metric arithmetic mean over available iterations."""
    by_comment: dict[str, list[ScoreRecord]] = {}
    for record in records:
        by_comment.setdefault(record.comment_id, []).append(record)
    verdicts = []
    for comment_id, group in by_comment.items():
        iterations = {r.iteration for r in group}
        if len(iterations) < coverage:
            log.warning(
                "comment %s has %d/%d iterations", comment_id, len(iterations), coverage
            )
        means = {
            metric: sum(r.scores[metric].score for r in group) / len(group)
            for metric in METRICS
        }
        verdicts.append(
            CommentVerdict(
                comment_id=comment_id,
                means=means,
                iteration_count=len(iterations),
            )
        )
    return verdicts


def score_record_to_json(record: ScoreRecord, **metadata) -> dict:
    row = dict(metadata)
    row.update(
        {
            "comment_id": record.comment_id,
            "iteration": record.iteration,
            "judge_model": record.judge_model,
            "scores": {
                metric: {"reasoning": ms.reasoning, "score": ms.score}
                for metric, ms in record.scores.items()
            },
        }
    )
    return row


def score_record_from_json(row: dict) -> ScoreRecord:
    return ScoreRecord(
        comment_id=row["comment_id"],
        iteration=row["iteration"],
        judge_model=row["judge_model"],
        scores={
            metric: MetricScore(reasoning=cell["reasoning"], score=cell["score"])
            for metric, cell in row["scores"].items()
        },
    )
