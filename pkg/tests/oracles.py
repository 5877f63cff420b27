"""Independent brute-force reference implementations.

These deliberately avoid the library's code paths (explicit loops, direct
definitions) so that agreement is meaningful.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path


def corpus_stats_oracle(directory: Path, label_rule) -> dict:
    """Per-corpus statistics computed straight off the raw files."""
    files = modules = lines = tokens = chars = 0
    for path in sorted(directory.iterdir()):
        text = path.read_text(encoding="utf-8").replace("\r\n", "\n")
        file_lines = text.split("\n")
        if text.endswith("\n"):
            file_lines = file_lines[:-1]
        files += 1
        lines += len(file_lines)
        chars += len(text)
        tokens += math.ceil(len(text) / 4)
        modules += label_rule(file_lines)
    return {
        "files": files,
        "modules": modules,
        "lines": lines,
        "tokens": tokens,
        "characters": chars,
    }


def mumps_module_count(file_lines: list[str]) -> int:
    count = 0
    saw_label_first = False
    for index, line in enumerate(file_lines):
        if line and not line.startswith(";") and (line[0].isalnum() or line[0] == "%"):
            count += 1
            if index == 0:
                saw_label_first = True
    if count == 0:
        return 1 if file_lines else 0
    return count if saw_label_first else count + 1


def alc_module_count(file_lines: list[str]) -> int:
    count = 0
    first_is_section = False
    continuation = False
    code_index = 0
    any_code = False
    for line in file_lines:
        if line.startswith("*") or line.startswith(".*"):
            continue  # comment lines are stripped before detection
        any_code = True
        is_continuation = continuation
        continuation = len(line) >= 72 and line[71] not in (" ", "\t")
        if is_continuation:
            code_index += 1
            continue
        tokens = line.split()
        op = None
        if line and line[0] not in (" ", "\t"):
            op = tokens[1] if len(tokens) > 1 else None
        elif tokens:
            op = tokens[0]
        if op and op.upper() in ("CSECT", "DSECT"):
            count += 1
            if code_index == 0:
                first_is_section = True
        code_index += 1
    if count == 0:
        return 1 if any_code else 0
    return count if first_is_section else count + 1


def greedy_fixed_length_oracle(line_lengths: list[int], budget: int) -> list[int]:
    """Greedy accumulation over quarter-char arithmetic."""
    splits = []
    current = None
    for index, length in enumerate(line_lengths):
        if current is None:
            current = length
            continue
        candidate = current + 1 + length
        if math.ceil(candidate / 4) <= budget:
            current = candidate
        else:
            splits.append(index)
            current = length
    return splits


def pr_oracle(predicted: set[int], truth: set[int]) -> tuple[Fraction, Fraction]:
    """Direct set-arithmetic definition of split-point precision/recall."""
    tp = len(predicted & truth)
    precision = Fraction(tp, len(predicted)) if predicted else Fraction(1)
    recall = Fraction(tp, len(truth)) if truth else Fraction(1)
    return precision, recall


def icc2k_oracle(matrix: list[list[float]]) -> float:
    """Explicit loop-based two-way ANOVA sum-of-squares decomposition."""
    n = len(matrix)
    k = len(matrix[0])
    grand = sum(sum(row) for row in matrix) / (n * k)
    row_means = [sum(row) / k for row in matrix]
    col_means = [sum(matrix[i][j] for i in range(n)) / n for j in range(k)]
    ss_rows = k * sum((m - grand) ** 2 for m in row_means)
    ss_cols = n * sum((m - grand) ** 2 for m in col_means)
    ss_total = sum((matrix[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    ss_error = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_error / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (msc - mse) / n)


def spearman_rho_oracle(xs, ys) -> float:
    """Direct definition: average ranks, then the Pearson formula."""

    def ranks(values):
        order = sorted(range(len(values)), key=lambda i: values[i])
        out = [0.0] * len(values)
        i = 0
        while i < len(values):
            j = i
            while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
                j += 1
            for position in range(i, j + 1):
                out[order[position]] = (i + j) / 2 + 1
            i = j + 1
        return out

    rx, ry = ranks(list(xs)), ranks(list(ys))
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / (vx * vy) ** 0.5
