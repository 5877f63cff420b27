"""Report figures: precision/recall scatter and score distribution boxes.

SVG output is made byte-stable (fixed hash salt, no embedded date) so that
re-running a report stage reproduces identical artifacts.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "chunkdoc"

_METHOD_COLORS = {
    "FullFile": "tab:gray",
    "FixedLength": "tab:orange",
    "SingleModule": "tab:green",
    "MultipleModules": "tab:olive",
    "HumanPartitions": "tab:blue",
    "LlmPartitions": "tab:red",
}

_SAVE_KWARGS = {"metadata": {"Date": None}, "bbox_inches": "tight"}


def _variant_name(row: dict) -> str:
    budget = row["budget"]
    return row["method"] if budget == "unlimited" else f"{row['method']}@{budget}"


def render_pr_scatter(rows: list[dict], corpus: str, out_path: str | Path) -> None:
    """One point per partition variant in precision/recall space."""
    fig, ax = plt.subplots(figsize=(7, 6))
    seen_methods = set()
    for row in sorted(rows, key=_variant_name):
        color = _METHOD_COLORS.get(row["method"], "black")
        label = row["method"] if row["method"] not in seen_methods else None
        seen_methods.add(row["method"])
        ax.scatter(row["recall"], row["precision"], color=color, label=label, s=60,
                   edgecolors="black", linewidths=0.5, zorder=3)
        if row["budget"] != "unlimited":
            ax.annotate(row["budget"], (row["recall"], row["precision"]),
                        textcoords="offset points", xytext=(5, 4), fontsize=7)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.grid(True, linewidth=0.3, alpha=0.5)
    ax.set_title(f"Split-point agreement with human partitions ({corpus})")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)


def render_score_distribution(
    verdicts: list[dict], metric: str, corpus: str, model: str, out_path: str | Path
) -> None:
    """Per-variant box plot of comment-level means, medians marked in black."""
    by_variant: dict[str, list[float]] = {}
    for row in verdicts:
        by_variant.setdefault(_variant_name(row), []).append(row[metric])
    names = sorted(by_variant)
    data = [by_variant[name] for name in names]
    fig, ax = plt.subplots(figsize=(max(8, 0.6 * len(names)), 5))
    boxes = ax.boxplot(
        data,
        tick_labels=names,
        showmeans=False,
        medianprops={"color": "black", "linewidth": 1.6},
        patch_artist=True,
    )
    for name, patch in zip(names, boxes["boxes"]):
        method = name.split("@")[0]
        patch.set_facecolor(_METHOD_COLORS.get(method, "white"))
        patch.set_alpha(0.45)
    ax.set_ylabel(f"{metric} score")
    ax.set_ylim(0, 100)
    ax.set_title(f"{metric} by chunking variant ({corpus}, {model})")
    ax.tick_params(axis="x", rotation=75, labelsize=7)
    ax.grid(True, axis="y", linewidth=0.3, alpha=0.5)
    fig.savefig(out_path, **_SAVE_KWARGS)
    plt.close(fig)
