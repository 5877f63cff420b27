"""Evaluation statistics: split-point precision/recall, inter-iteration
reliability (ICC2k), Spearman rank correlation, and grouped summaries."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .chunking import ChunkMethod, Partition
from .corpus import TokenBudget


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class PartitionMetrics:
    method: ChunkMethod
    budget: TokenBudget
    precision: Fraction
    recall: Fraction
    tp: int
    fp: int
    fn: int


def _match_with_tolerance(
    predicted: Sequence[int], truth: Sequence[int], tolerance: int
) -> int:
    """Greedy one-to-one matching of predicted to truth points within ±tolerance."""
    unused = sorted(truth)
    matched = 0
    for point in sorted(predicted):
        best = None
        for candidate in unused:
            if abs(candidate - point) <= tolerance:
                if best is None or abs(candidate - point) < abs(best - point):
                    best = candidate
            elif candidate > point + tolerance:
                break
        if best is not None:
            unused.remove(best)
            matched += 1
    return matched


VACUOUS_SCORE = Fraction(1)  # an empty denominator counts as perfect


def split_point_pr(
    predicted: Partition,
    truth: Partition,
    tolerance: int = 0,
    empty_score: Fraction = VACUOUS_SCORE,
) -> PartitionMetrics:
    """Precision/recall of predicted split points against ground truth.

    Exact line-index matching by default.  Empty denominators score
    ``empty_score``: by convention an empty prediction has perfect
    precision and an empty truth perfect recall.
    """
    if predicted.file_digest != truth.file_digest:
        raise MetricsError(
            f"partitions reference different files: {predicted.file_digest[:12]} vs "
            f"{truth.file_digest[:12]}"
        )
    predicted_set = set(predicted.split_points)
    truth_set = set(truth.split_points)
    if tolerance == 0:
        tp = len(predicted_set & truth_set)
    else:
        tp = _match_with_tolerance(predicted.split_points, truth.split_points, tolerance)
    fp = len(predicted_set) - tp
    fn = len(truth_set) - tp
    precision = Fraction(tp, tp + fp) if tp + fp > 0 else empty_score
    recall = Fraction(tp, tp + fn) if tp + fn > 0 else empty_score
    return PartitionMetrics(
        method=predicted.method,
        budget=predicted.budget,
        precision=precision,
        recall=recall,
        tp=tp,
        fp=fp,
        fn=fn,
    )


def pool_partition_metrics(
    per_file: Iterable[PartitionMetrics],
    method: ChunkMethod,
    budget: TokenBudget,
    empty_score: Fraction = VACUOUS_SCORE,
) -> PartitionMetrics:
    """Micro-average: pool tp/fp/fn across files, then take the fractions."""
    tp = fp = fn = 0
    for m in per_file:
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    precision = Fraction(tp, tp + fp) if tp + fp > 0 else empty_score
    recall = Fraction(tp, tp + fn) if tp + fn > 0 else empty_score
    return PartitionMetrics(method, budget, precision, recall, tp, fp, fn)


def icc2k(ratings) -> float:
    """Two-way random-effects, absolute-agreement, average-measures ICC.

    ``ratings`` is an (n targets x k raters) matrix with no missing cells.
    Computed as (MSR - MSE) / (MSR + (MSC - MSE) / n) from the two-way ANOVA
    mean squares.  A matrix with no variance at all is degenerate and scores
    0 with a warning.
    """
    matrix = np.asarray(ratings, dtype=float)
    if matrix.ndim != 2:
        raise MetricsError(f"ratings must be 2-dimensional, got shape {matrix.shape}")
    n, k = matrix.shape
    if n < 2 or k < 2:
        raise MetricsError(f"need at least 2 targets and 2 raters, got {n}x{k}")
    if not np.isfinite(matrix).all():
        raise MetricsError("ratings matrix holds missing or non-finite cells")

    grand = matrix.mean()
    row_means = matrix.mean(axis=1)
    col_means = matrix.mean(axis=0)
    ss_total = ((matrix - grand) ** 2).sum()
    ss_rows = k * ((row_means - grand) ** 2).sum()
    ss_cols = n * ((col_means - grand) ** 2).sum()
    ss_error = ss_total - ss_rows - ss_cols

    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_error / ((n - 1) * (k - 1))

    denominator = msr + (msc - mse) / n
    if denominator == 0.0:
        warnings.warn("degenerate ratings matrix (zero variance); ICC2k defined as 0")
        return 0.0
    return float((msr - mse) / denominator)


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p: float
    n: int


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    array = np.asarray(values, dtype=float)
    order = np.argsort(array, kind="mergesort")
    ranks = np.empty(len(array), dtype=float)
    i = 0
    while i < len(array):
        j = i
        while j + 1 < len(array) and array[order[j + 1]] == array[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> SpearmanResult:
    """Spearman rank correlation with average-rank ties.

    rho is the Pearson correlation of the rank vectors; the two-sided p
    comes from the t approximation rho*sqrt((n-2)/(1-rho^2)) on n-2 degrees
    of freedom.
    """
    if len(xs) != len(ys):
        raise MetricsError(f"length mismatch: {len(xs)} vs {len(ys)}")
    n = len(xs)
    if n < 3:
        raise MetricsError(f"need at least 3 observations, got {n}")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    vx = float((dx * dx).sum())
    vy = float((dy * dy).sum())
    if vx == 0.0 or vy == 0.0:
        raise MetricsError("zero rank variance; correlation undefined")
    rho = float((dx * dy).sum() / np.sqrt(vx * vy))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(2.0 * scipy_stats.t.sf(abs(t), df=n - 2))
    return SpearmanResult(rho=rho, p=p, n=n)


def summarize(
    rows: Sequence[Mapping],
    group_by: Sequence[str],
    value_fields: Sequence[str],
) -> list[dict]:
    """Per-group distribution summary of each value field.

    Returns one output row per (group, field): median, mean, first and third
    quartiles, and n.  Groups never mix rows with different key tuples.
    """
    groups: dict[tuple, list[Mapping]] = {}
    for row in rows:
        key = tuple(row[k] for k in group_by)
        groups.setdefault(key, []).append(row)
    summary = []
    for key in sorted(groups, key=lambda k: tuple(str(part) for part in k)):
        members = groups[key]
        for field in value_fields:
            values = np.asarray([float(m[field]) for m in members])
            summary.append(
                {
                    **dict(zip(group_by, key)),
                    "metric": field,
                    "n": len(values),
                    "mean": float(values.mean()),
                    "median": float(np.median(values)),
                    "q1": float(np.percentile(values, 25)),
                    "q3": float(np.percentile(values, 75)),
                }
            )
    return summary
