"""The five pipeline stages: prepare, partition, generate, judge, report.

Stages run sequentially against a content-addressed run directory
(``runs/<run_id>/<stage>/...``); nothing is overwritten in place, inputs are
digest-verified before use, and all model traffic flows through the cached
gateway so an interrupted run resumes without repeating network calls.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings as warnings_module
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import chunking, docgen, judge as judging, metrics as stats
from .chunking import ChunkMethod, Partition, TokenBudget, variant_grid, variant_label
from .config import PipelineConfig
from .corpus import (
    Language,
    SourceFile,
    assign_line_ids,
    detect_newline_convention,
    from_prepared_json,
    insert_module_markers,
    load_source,
    make_counter,
    strip_comments,
    to_prepared_json,
)
from .llmgate import Gateway, OpenAIChatProvider, estimate_requests
from .manifest import RunManifest
from .mocks import standard_mock_provider
from .structure import (
    assign_marker_ids,
    boundaries_from_json,
    boundaries_to_json,
    find_modules,
)

log = logging.getLogger(__name__)

# Published reliability/correlation figures the reports are compared against.
REFERENCE_ICC2K = {"mumps": 0.960, "alc": 0.908}
REFERENCE_SPEARMAN = {("mumps", "hallucination"): 0.199}

_CORPUS_GLOBS = {"mumps": ("*.m",), "alc": ("*.asm", "*.mac")}
_CORPUS_LANGUAGE = {"mumps": Language.MUMPS, "alc": Language.ALC}


class StageError(Exception):
    pass


@dataclass
class RunContext:
    config: PipelineConfig
    run_id: str
    run_dir: Path
    manifest: RunManifest

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def stage_dir(self, stage: str) -> Path:
        path = self.run_dir / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_manifest(self) -> None:
        self.manifest.save(self.manifest_path)

    def counter(self):
        return make_counter(self.config.tokenizer.name, self.config.tokenizer.vocab_path)


def make_run_context(config: PipelineConfig, run_id: str | None = None) -> RunContext:
    run_id = run_id or f"run-{config.canonical_digest()[:12]}"
    run_dir = Path(config.runs_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
        if manifest.config_digest != config.canonical_digest():
            raise StageError(
                f"run {run_id} was created with a different config "
                f"({manifest.config_digest[:12]} != {config.canonical_digest()[:12]}); "
                "use a new --run-id or restore the original config"
            )
    else:
        manifest = RunManifest(
            run_id=run_id,
            config=config.as_dict(),
            config_digest=config.canonical_digest(),
        )
    return RunContext(config=config, run_id=run_id, run_dir=run_dir, manifest=manifest)


def build_gateway(config: PipelineConfig, provider=None) -> Gateway:
    if provider is None:
        if config.provider.kind == "mock":
            provider = standard_mock_provider(judge_seed=config.mock.judge_seed)
        else:
            provider = OpenAIChatProvider(
                base_url=config.provider.base_url,
                api_key_env=config.provider.api_key_env,
                timeout_s=config.provider.timeout_s,
            )
    cache_dir = Path(config.provider.cache_dir)
    if not cache_dir.is_absolute():
        cache_dir = Path(config.runs_dir) / cache_dir
    return Gateway(
        provider=provider,
        cache_dir=cache_dir,
        max_attempts=config.provider.max_attempts,
        rate_limit_per_s=config.provider.rate_limit_per_s,
        max_in_flight=config.provider.max_in_flight,
    )


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    tmp.replace(path)


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _fan_out(tasks, worker, n_workers: int) -> list:
    if n_workers <= 1:
        return [worker(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, tasks))


def _finish_stage(ctx: RunContext, name: str, record_updates: dict) -> None:
    record = ctx.manifest.stage(name)
    for key, value in record_updates.items():
        setattr(record, key, value)
    record.completed = not record.failures
    record.completed_at = time.time()
    ctx.save_manifest()


def _skip_if_resumable(ctx: RunContext, stage: str, resume: bool) -> bool:
    record = ctx.manifest.stage(stage)
    if not (resume and record.completed):
        return False
    missing = [a for a in record.artifacts if not (ctx.run_dir / a).exists()]
    if missing:
        raise StageError(f"stage {stage} marked complete but artifacts missing: {missing[:3]}")
    record.gateway = {"requests": 0, "cache_hits": 0, "network_calls": 0, "skipped": True}
    ctx.save_manifest()
    print(f"[{stage}] already complete for run {ctx.run_id}; skipping (resume)")
    return True


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def _corpus_sources(ctx: RunContext) -> list[tuple[str, Path]]:
    pairs = []
    for corpus, directory in (
        ("mumps", ctx.config.corpus.mumps_dir),
        ("alc", ctx.config.corpus.alc_dir),
    ):
        if directory is None:
            continue
        root = Path(directory)
        if not root.is_dir():
            raise StageError(f"{corpus} corpus directory {root} does not exist")
        files = sorted(
            {path for pattern in _CORPUS_GLOBS[corpus] for path in root.rglob(pattern)}
        )
        pairs.extend((corpus, path) for path in files)
    return pairs


def file_stem(corpus: str, path: Path) -> str:
    return f"{corpus}__{path.name}"


def _verify_raw_corpus(ctx: RunContext) -> None:
    for corpus in ctx.manifest.corpora.values():
        for row in corpus["files"]:
            path = Path(row["path"])
            if not path.exists():
                raise StageError(f"stale inputs: {path} has disappeared since prepare")
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != row["raw_digest"]:
                raise StageError(
                    f"stale inputs: {path} changed since prepare "
                    f"({digest[:12]} != {row['raw_digest'][:12]})"
                )


def cmd_prepare(ctx: RunContext, resume: bool = False, dry_run: bool = False) -> dict:
    """Strip, line-identify, detect modules, and marker-annotate every file."""
    if resume and ctx.manifest.stage("prepare").completed:
        _verify_raw_corpus(ctx)
    if _skip_if_resumable(ctx, "prepare", resume):
        return ctx.manifest.stage("prepare").stats
    sources = _corpus_sources(ctx)
    if dry_run:
        print(f"[prepare] would process {len(sources)} files")
        return {}

    out_dir = ctx.stage_dir("prepare")
    counter = ctx.counter()
    seed = ctx.config.seed
    artifacts: list[str] = []
    warnings: list[str] = []
    failures: list[str] = []
    corpora: dict = {}

    for corpus, path in sources:
        inventory = corpora.setdefault(
            corpus,
            {"dir": str(Path(path).parent), "language": _CORPUS_LANGUAGE[corpus].value,
             "files": []},
        )
        try:
            original = load_source(path, _CORPUS_LANGUAGE[corpus])
            if original.line_count == 0:
                warnings.append(f"{path}: empty file skipped")
                continue
            ctx.manifest.newline_conventions[str(path)] = detect_newline_convention(
                path.read_bytes()
            )
            stripped = strip_comments(original)
            prepared = assign_line_ids(stripped, seed)
            boundaries = assign_marker_ids(find_modules(prepared), prepared, seed)
            marked = insert_module_markers(prepared, boundaries, seed)

            stem = file_stem(corpus, path)
            for suffix, payload in (
                ("prepared", to_prepared_json(prepared)),
                ("boundaries", boundaries_to_json(prepared, boundaries)),
                ("marked", to_prepared_json(marked)),
            ):
                artifact = out_dir / f"{stem}.{suffix}.json"
                _write_json(artifact, payload)
                artifacts.append(str(artifact.relative_to(ctx.run_dir)))

            inventory["files"].append(
                {
                    "name": path.name,
                    "stem": stem,
                    "path": str(path),
                    "raw_digest": original.byte_digest,
                    "prepared_digest": prepared.byte_digest,
                    "marked_digest": marked.byte_digest,
                    "lines": original.line_count,
                    "characters": len(original.content),
                    "tokens": counter.count(original.content),
                    "modules": len(boundaries),
                }
            )
        except Exception as exc:  # noqa: BLE001 - per-file failure ledger
            failures.append(f"{path}: {exc}")
            log.exception("prepare failed for %s", path)

    stats_rows = []
    for corpus, inventory in corpora.items():
        rows = inventory["files"]
        corpus_stats = {
            "files": len(rows),
            "modules": sum(r["modules"] for r in rows),
            "lines": sum(r["lines"] for r in rows),
            "tokens": sum(r["tokens"] for r in rows),
            "characters": sum(r["characters"] for r in rows),
        }
        inventory["stats"] = corpus_stats
        stats_rows.append({"corpus": corpus, **corpus_stats})

    stats_path = ctx.stage_dir("prepare") / "corpus_stats.csv"
    _write_csv(
        stats_path,
        stats_rows,
        ["corpus", "files", "modules", "lines", "tokens", "characters"],
    )
    artifacts.append(str(stats_path.relative_to(ctx.run_dir)))

    print(f"{'corpus':<8}{'files':>8}{'modules':>10}{'lines':>10}{'tokens':>12}{'characters':>13}")
    for row in stats_rows:
        print(
            f"{row['corpus']:<8}{row['files']:>8,}{row['modules']:>10,}"
            f"{row['lines']:>10,}{row['tokens']:>12,}{row['characters']:>13,}"
        )
    for warning in warnings:
        print(f"[prepare] warning: {warning}")

    ctx.manifest.corpora = corpora
    _finish_stage(
        ctx,
        "prepare",
        {
            "artifacts": artifacts,
            "warnings": warnings,
            "failures": failures,
            "stats": {row["corpus"]: {k: row[k] for k in row if k != "corpus"} for row in stats_rows},
        },
    )
    return {row["corpus"]: row for row in stats_rows}


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


def _iter_manifest_files(ctx: RunContext):
    for corpus in sorted(ctx.manifest.corpora):
        for row in ctx.manifest.corpora[corpus]["files"]:
            yield corpus, row


def _load_prepared(ctx: RunContext, row: dict, kind: str) -> SourceFile:
    path = ctx.stage_dir("prepare") / f"{row['stem']}.{kind}.json"
    if not path.exists():
        raise StageError(f"missing prepare artifact {path}; re-run prepare")
    file = from_prepared_json(_read_json(path))
    expected = row[f"{kind}_digest"]
    if file.byte_digest != expected:
        raise StageError(
            f"stale input: {path} digest {file.byte_digest[:12]} does not match "
            f"manifest {expected[:12]}"
        )
    return file


def _load_boundaries(ctx: RunContext, row: dict):
    path = ctx.stage_dir("prepare") / f"{row['stem']}.boundaries.json"
    payload = _read_json(path)
    if payload.get("file_digest") != row["prepared_digest"]:
        raise StageError(f"stale boundaries sidecar {path}")
    return boundaries_from_json(payload)


def _human_partition_payload(ctx: RunContext, row: dict) -> dict | None:
    directory = ctx.config.corpus.human_partitions_dir
    if directory is None:
        return None
    path = Path(directory) / f"{row['name']}.json"
    if not path.exists():
        return None
    return _read_json(path)


def cmd_partition(
    ctx: RunContext, resume: bool = False, dry_run: bool = False, gateway: Gateway | None = None
) -> dict:
    """Produce the 16 partition variants (and chunk manifests) per file."""
    ctx.manifest.require_completed("prepare")
    if _skip_if_resumable(ctx, "partition", resume):
        return ctx.manifest.stage("partition").stats
    files = list(_iter_manifest_files(ctx))
    if dry_run:
        print(f"[partition] would emit {len(files) * 16} partitions for {len(files)} files")
        return {}

    gateway = gateway or build_gateway(ctx.config)
    counter = ctx.counter()
    out_dir = ctx.stage_dir("partition")
    artifacts: list[str] = []
    warnings: list[str] = []
    failures: list[str] = []
    per_file_counts: dict[str, int] = {}
    fallback_events: list[str] = []

    for corpus, row in files:
        try:
            prepared = _load_prepared(ctx, row, "prepared")
            boundaries = _load_boundaries(ctx, row)
            human_payload = _human_partition_payload(ctx, row)
            human = None
            if human_payload is not None:
                human = chunking.load_human_partition(prepared, human_payload)
            else:
                warnings.append(
                    f"{row['name']}: no human partition file; emitting 15 variants"
                )
            variants = chunking.generate_variants(
                prepared,
                boundaries,
                human,
                gateway,
                counter,
                model_id=ctx.config.models.partitioner,
                budgets=ctx.config.budgets,
                max_rounds=ctx.config.max_requery_rounds,
                temperature=ctx.config.temperatures.partition,
            )
            per_file_counts[row["stem"]] = len(variants)
            for partition in variants:
                chunks = chunking.partition_to_chunks(prepared, partition, counter)
                for chunk in chunks:
                    if chunk.oversize:
                        fallback_events.append(
                            f"{row['stem']}:{partition.label}: chunk {chunk.ordinal} "
                            f"oversize ({chunk.token_count} tokens)"
                        )
                if partition.fallback_forced_splits:
                    fallback_events.append(
                        f"{row['stem']}:{partition.label}: force-split at "
                        f"{list(partition.fallback_forced_splits)}"
                    )
                base = out_dir / row["stem"] / partition.label
                _write_json(
                    base.with_suffix(".json"), chunking.partition_to_json(partition)
                )
                _write_json(
                    base.parent / f"{partition.label}.chunks.json",
                    chunking.chunks_to_json(chunks),
                )
                artifacts.append(str(base.with_suffix(".json").relative_to(ctx.run_dir)))
                artifacts.append(
                    str((base.parent / f"{partition.label}.chunks.json").relative_to(ctx.run_dir))
                )
        except Exception as exc:  # noqa: BLE001
            failures.append(f"{row['stem']}: {exc}")
            log.exception("partition failed for %s", row["stem"])

    for warning in warnings:
        print(f"[partition] warning: {warning}")
    total = sum(per_file_counts.values())
    print(f"[partition] wrote {total} partitions across {len(per_file_counts)} files")

    _finish_stage(
        ctx,
        "partition",
        {
            "artifacts": artifacts,
            "warnings": warnings,
            "failures": failures,
            "gateway": gateway.stats.as_dict(),
            "stats": {
                "per_file_variants": per_file_counts,
                "fallback_events": fallback_events,
            },
        },
    )
    return {"per_file_variants": per_file_counts}


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _variant_labels(ctx: RunContext) -> list[str]:
    return [variant_label(m, b) for m, b in variant_grid(ctx.config.budgets)]


def _load_partition(ctx: RunContext, row: dict, label: str) -> Partition | None:
    path = ctx.stage_dir("partition") / row["stem"] / f"{label}.json"
    if not path.exists():
        return None
    partition = chunking.partition_from_json(_read_json(path))
    if partition.file_digest != row["prepared_digest"]:
        raise StageError(f"stale partition artifact {path}")
    return partition


def total_modules(ctx: RunContext) -> int:
    return sum(
        inventory["stats"]["modules"] for inventory in ctx.manifest.corpora.values()
    )


def cmd_generate(
    ctx: RunContext,
    resume: bool = False,
    dry_run: bool = False,
    gateway: Gateway | None = None,
    grid_override: dict | None = None,
) -> dict:
    """One CommentSet per (file, partition variant, generator model)."""
    ctx.manifest.require_completed("prepare")
    if dry_run:
        grid = {
            "n_comments": total_modules(ctx) or 1,
            "n_models": len(ctx.config.models.generators),
            "n_methods": len(_variant_labels(ctx)),
            "coverage": ctx.config.coverage,
            **(grid_override or {}),
        }
        estimate = estimate_requests(**grid)
        print(
            f"[generate] dry-run: {grid['n_comments']:,} comments x "
            f"{grid['n_models']} models x {grid['n_methods']} methods x "
            f"{grid['coverage']}x coverage = {estimate:,} evaluation requests"
        )
        return {"estimated_requests": estimate}
    ctx.manifest.require_completed("partition")
    if _skip_if_resumable(ctx, "generate", resume):
        return ctx.manifest.stage("generate").stats

    gateway = gateway or build_gateway(ctx.config)
    out_dir = ctx.stage_dir("generate")
    artifacts: list[str] = []
    warnings: list[str] = []
    failures: list[str] = []
    missing_ledger: dict[str, list[str]] = {}
    condition_count = 0

    tasks = []
    for corpus, row in _iter_manifest_files(ctx):
        for label in _variant_labels(ctx):
            for model in ctx.config.models.generators:
                tasks.append((corpus, row, label, model))

    def run_task(task):
        corpus, row, label, model = task
        marked = _load_prepared(ctx, row, "marked")
        boundaries = _load_boundaries(ctx, row)
        partition = _load_partition(ctx, row, label)
        if partition is None:
            return (task, None, f"{row['stem']}/{label}: partition artifact absent")
        annotated = docgen.annotate_chunks(marked, boundaries, partition)
        comment_set = docgen.generate_comments(
            annotated,
            gateway,
            marked.language,
            marked.byte_digest,
            model,
            partition.method,
            partition.budget,
            temperature=ctx.config.temperatures.docgen,
        )
        return (task, comment_set, None)

    results = _fan_out(tasks, run_task, ctx.config.workers)
    for (corpus, row, label, model), comment_set, problem in results:
        if problem is not None:
            if "HumanPartitions" in problem:
                warnings.append(problem)
            else:
                failures.append(problem)
            continue
        condition_count += 1
        name = f"{label}__{model}.json"
        path = out_dir / row["stem"] / name
        _write_json(path, docgen.comment_set_to_json(comment_set))
        artifacts.append(str(path.relative_to(ctx.run_dir)))
        if comment_set.missing:
            missing_ledger[f"{row['stem']}/{label}/{model}"] = sorted(comment_set.missing)
        for failure in comment_set.failures:
            failures.append(f"{row['stem']}/{label}/{model}: {failure}")

    if missing_ledger:
        ledger_path = out_dir / "missing_ids.json"
        _write_json(ledger_path, missing_ledger)
        artifacts.append(str(ledger_path.relative_to(ctx.run_dir)))
    print(f"[generate] wrote {condition_count} comment sets")

    _finish_stage(
        ctx,
        "generate",
        {
            "artifacts": artifacts,
            "warnings": warnings,
            "failures": failures,
            "gateway": gateway.stats.as_dict(),
            "stats": {"conditions": condition_count, "missing": missing_ledger},
        },
    )
    return {"conditions": condition_count}


# ---------------------------------------------------------------------------
# judge
# ---------------------------------------------------------------------------


def _budget_csv_value(budget: TokenBudget) -> str:
    return "unlimited" if budget.limit is None else str(budget.limit)


def cmd_judge(
    ctx: RunContext, resume: bool = False, dry_run: bool = False, gateway: Gateway | None = None
) -> dict:
    """Windowed repeated evaluation of every generated comment."""
    ctx.manifest.require_completed("generate")
    if _skip_if_resumable(ctx, "judge", resume):
        return ctx.manifest.stage("judge").stats

    coverage = ctx.config.coverage
    conditions = []
    for corpus, row in _iter_manifest_files(ctx):
        comment_dir = ctx.stage_dir("generate") / row["stem"]
        if not comment_dir.is_dir():
            continue
        for path in sorted(comment_dir.glob("*.json")):
            conditions.append((corpus, row, path))
    if dry_run:
        est = len(conditions) * len(ctx.config.models.judges) * coverage
        print(f"[judge] dry-run: {len(conditions)} conditions x judges x coverage ~ {est:,} windows lower bound")
        return {}

    gateway = gateway or build_gateway(ctx.config)
    counter = ctx.counter()
    out_dir = ctx.stage_dir("judge")
    score_rows: list[dict] = []
    verdict_rows: list[dict] = []
    failures: list[str] = []
    warnings: list[str] = []

    def run_condition(item):
        try:
            return _judge_condition(item)
        except Exception as exc:  # noqa: BLE001 - per-condition failure ledger
            log.exception("judging failed for %s", item[2])
            return (item, [], [], ("failure", f"{item[2].name}: {exc}"))

    def _judge_condition(item):
        corpus, row, path = item
        payload = _read_json(path)
        comment_set = docgen.comment_set_from_json(payload)
        marked = _load_prepared(ctx, row, "marked")
        merged = docgen.merge_comments(marked, comment_set)
        if not comment_set.comments:
            return (item, [], [], ("warning", f"{path.name}: no comments to judge"))
        windows = judging.build_windows(
            merged,
            ctx.config.window_size,
            counter,
            ctx.config.max_judge_context_tokens,
        )
        local_scores = []
        local_verdicts = []
        for judge_model in ctx.config.models.judges:
            records: list[judging.ScoreRecord] = []
            for window in windows:
                for iteration in range(coverage):
                    records.extend(
                        judging.judge_window(
                            window,
                            gateway,
                            iteration,
                            judge_model,
                            temperature=ctx.config.temperatures.judge,
                        )
                    )
            metadata = {
                "corpus": corpus,
                "file": row["name"],
                "file_digest": comment_set.file_digest,
                "model": comment_set.model_id,
                "method": comment_set.method.value,
                "budget": _budget_csv_value(comment_set.budget),
            }
            local_scores.extend(
                judging.score_record_to_json(record, **metadata) for record in records
            )
            for verdict in judging.aggregate(records, coverage):
                local_verdicts.append(
                    {
                        **metadata,
                        "judge_model": judge_model,
                        "comment_id": verdict.comment_id,
                        **{m: verdict.means[m] for m in judging.METRICS},
                        "iteration_count": verdict.iteration_count,
                    }
                )
        return (item, local_scores, local_verdicts, None)

    results = _fan_out(conditions, run_condition, ctx.config.workers)
    for (corpus, row, path), local_scores, local_verdicts, problem in results:
        if problem is not None:
            kind, message = problem
            (failures if kind == "failure" else warnings).append(message)
            continue
        score_rows.extend(local_scores)
        verdict_rows.extend(local_verdicts)

    scores_path = out_dir / "scores.jsonl"
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    with scores_path.open("w", encoding="utf-8") as handle:
        for score_row in score_rows:
            handle.write(json.dumps(score_row, sort_keys=True, ensure_ascii=False) + "\n")

    verdict_columns = [
        "corpus", "file", "file_digest", "model", "method", "budget",
        "judge_model", "comment_id", *judging.METRICS, "iteration_count",
    ]
    verdicts_path = out_dir / "verdicts.csv"
    _write_csv(verdicts_path, verdict_rows, verdict_columns)

    icc_rows = compute_icc_rows(score_rows, coverage)
    icc_path = out_dir / "icc.csv"
    _write_csv(
        icc_path,
        icc_rows,
        ["corpus", "judge_model", "metric", "icc2k", "targets", "raters", "degenerate"],
    )
    for icc_row in icc_rows:
        reference = REFERENCE_ICC2K.get(icc_row["corpus"])
        suffix = ""
        if reference is not None and icc_row["metric"] == "overall":
            suffix = f" (reference {reference:.3f})"
        if icc_row["degenerate"]:
            suffix += " [degenerate: zero variance]"
        print(
            f"[judge] ICC2k {icc_row['corpus']}/{icc_row['judge_model']}/"
            f"{icc_row['metric']}: {icc_row['icc2k']:.3f}{suffix}"
        )

    artifacts = [
        str(p.relative_to(ctx.run_dir)) for p in (scores_path, verdicts_path, icc_path)
    ]
    _finish_stage(
        ctx,
        "judge",
        {
            "artifacts": artifacts,
            "warnings": warnings,
            "failures": failures,
            "gateway": gateway.stats.as_dict(),
            "stats": {
                "score_rows": len(score_rows),
                "verdicts": len(verdict_rows),
                "icc": icc_rows,
            },
        },
    )
    return {"score_rows": len(score_rows), "verdicts": len(verdict_rows)}


def compute_icc_rows(score_rows: list[dict], coverage: int) -> list[dict]:
    """Reliability of repeated judging: one matrix per (corpus, judge model).

    Rows are fully covered (condition, comment) targets, columns are the
    iterations; cells are the metric score (or the mean of the four metrics
    for the ``overall`` row).
    """
    grouped: dict[tuple[str, str], dict] = {}
    for row in score_rows:
        key = (row["corpus"], row["judge_model"])
        target = (row["file"], row["model"], row["method"], row["budget"], row["comment_id"])
        grouped.setdefault(key, {}).setdefault(target, {})[row["iteration"]] = row["scores"]

    out = []
    for (corpus, judge_model), targets in sorted(grouped.items()):
        complete = {
            target: iterations
            for target, iterations in targets.items()
            if len(iterations) == coverage
        }
        if len(complete) < 2 or coverage < 2:
            continue
        ordered_targets = sorted(complete)
        for metric in (*judging.METRICS, "overall"):
            matrix = []
            for target in ordered_targets:
                cells = []
                for iteration in range(coverage):
                    scores = complete[target][iteration]
                    if metric == "overall":
                        cells.append(
                            sum(scores[m]["score"] for m in judging.METRICS)
                            / len(judging.METRICS)
                        )
                    else:
                        cells.append(scores[metric]["score"])
                matrix.append(cells)
            with warnings_module.catch_warnings(record=True) as caught:
                warnings_module.simplefilter("always")
                value = stats.icc2k(matrix)
            out.append(
                {
                    "corpus": corpus,
                    "judge_model": judge_model,
                    "metric": metric,
                    "icc2k": value,
                    "targets": len(ordered_targets),
                    "raters": coverage,
                    "degenerate": bool(caught),
                }
            )
    return out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_verdicts(ctx: RunContext) -> list[dict]:
    path = ctx.stage_dir("judge") / "verdicts.csv"
    if not path.exists():
        raise StageError("no verdicts.csv; run judge first")
    with path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    for row in rows:
        for metric in judging.METRICS:
            row[metric] = float(row[metric])
        row["iteration_count"] = int(row["iteration_count"])
    return rows


def compute_pr_rows(ctx: RunContext) -> tuple[list[dict], list[dict]]:
    """Micro-averaged and per-file precision/recall vs. human ground truth."""
    labels = _variant_labels(ctx)
    pooled_rows: list[dict] = []
    per_file_rows: list[dict] = []
    for corpus in sorted(ctx.manifest.corpora):
        rows = ctx.manifest.corpora[corpus]["files"]
        truths: dict[str, Partition] = {}
        for row in rows:
            truth = _load_partition(ctx, row, variant_label(ChunkMethod.HUMAN_PARTITIONS, chunking.UNLIMITED))
            if truth is not None:
                truths[row["stem"]] = truth
        if not truths:
            continue
        for label in labels:
            per_file = []
            method = budget = None
            for row in rows:
                if row["stem"] not in truths:
                    continue
                predicted = _load_partition(ctx, row, label)
                if predicted is None:
                    continue
                result = stats.split_point_pr(predicted, truths[row["stem"]])
                method, budget = result.method, result.budget
                per_file.append(result)
                per_file_rows.append(
                    {
                        "corpus": corpus,
                        "file": row["name"],
                        "method": result.method.value,
                        "budget": _budget_csv_value(result.budget),
                        "tp": result.tp,
                        "fp": result.fp,
                        "fn": result.fn,
                        "precision": float(result.precision),
                        "recall": float(result.recall),
                    }
                )
            if not per_file:
                continue
            pooled = stats.pool_partition_metrics(per_file, method, budget)
            pooled_rows.append(
                {
                    "corpus": corpus,
                    "method": pooled.method.value,
                    "budget": _budget_csv_value(pooled.budget),
                    "tp": pooled.tp,
                    "fp": pooled.fp,
                    "fn": pooled.fn,
                    "precision": float(pooled.precision),
                    "recall": float(pooled.recall),
                }
            )
    return pooled_rows, per_file_rows


FINITE_BUDGET_METHODS = {
    ChunkMethod.FIXED_LENGTH.value,
    ChunkMethod.MULTIPLE_MODULES.value,
    ChunkMethod.LLM_PARTITIONS.value,
}


def compute_spearman_rows(verdicts: list[dict]) -> list[dict]:
    """Budget-vs-score rank correlation over the finite-budget methods."""
    rows = []
    corpora = sorted({v["corpus"] for v in verdicts})
    for corpus in corpora:
        pool = [
            v
            for v in verdicts
            if v["corpus"] == corpus
            and v["method"] in FINITE_BUDGET_METHODS
            and v["budget"] != "unlimited"
        ]
        for metric in judging.METRICS:
            xs = [float(v["budget"]) for v in pool]
            ys = [v[metric] for v in pool]
            row = {"corpus": corpus, "metric": metric, "n": len(xs)}
            try:
                result = stats.spearman(xs, ys)
                row["rho"] = result.rho
                row["p"] = result.p
            except stats.MetricsError as exc:
                row["rho"] = ""
                row["p"] = ""
                row["note"] = str(exc)
            reference = REFERENCE_SPEARMAN.get((corpus, metric))
            if reference is not None:
                row["reference_rho"] = reference
            rows.append(row)
    return rows


def cmd_report(ctx: RunContext, resume: bool = False, dry_run: bool = False) -> dict:
    """Summary tables, precision/recall scatter, score distribution figures."""
    ctx.manifest.require_completed("judge")
    if _skip_if_resumable(ctx, "report", resume):
        return ctx.manifest.stage("report").stats
    if dry_run:
        print("[report] dry-run: would write summary tables and figures")
        return {}

    from . import plots

    out_dir = ctx.stage_dir("report")
    artifacts: list[str] = []
    verdicts = _read_verdicts(ctx)

    summary_rows = stats.summarize(
        verdicts,
        group_by=["corpus", "model", "method", "budget", "judge_model"],
        value_fields=list(judging.METRICS),
    )
    # Judges are also pooled, since it is unclear which view is more useful.
    if len({v["judge_model"] for v in verdicts}) > 1:
        pooled = stats.summarize(
            verdicts,
            group_by=["corpus", "model", "method", "budget"],
            value_fields=list(judging.METRICS),
        )
        summary_rows += [{**row, "judge_model": "(pooled)"} for row in pooled]
    summary_path = out_dir / "summary.csv"
    _write_csv(
        summary_path,
        summary_rows,
        ["corpus", "model", "method", "budget", "judge_model", "metric",
         "n", "mean", "median", "q1", "q3"],
    )
    artifacts.append(str(summary_path.relative_to(ctx.run_dir)))

    pooled_pr, per_file_pr = compute_pr_rows(ctx)
    pr_columns = ["corpus", "method", "budget", "tp", "fp", "fn", "precision", "recall"]
    if pooled_pr:
        pooled_path = out_dir / "pr_pooled.csv"
        _write_csv(pooled_path, pooled_pr, pr_columns)
        artifacts.append(str(pooled_path.relative_to(ctx.run_dir)))
        per_file_path = out_dir / "pr_per_file.csv"
        _write_csv(per_file_path, per_file_pr, ["corpus", "file", *pr_columns[1:]])
        artifacts.append(str(per_file_path.relative_to(ctx.run_dir)))
        for corpus in sorted({r["corpus"] for r in pooled_pr}):
            figure = out_dir / f"pr_scatter_{corpus}.svg"
            plots.render_pr_scatter(
                [r for r in pooled_pr if r["corpus"] == corpus], corpus, figure
            )
            artifacts.append(str(figure.relative_to(ctx.run_dir)))
    else:
        print("[report] no human ground truth found; precision/recall outputs skipped")

    spearman_rows = compute_spearman_rows(verdicts)
    spearman_path = out_dir / "spearman.csv"
    _write_csv(
        spearman_path,
        spearman_rows,
        ["corpus", "metric", "n", "rho", "p", "reference_rho", "note"],
    )
    artifacts.append(str(spearman_path.relative_to(ctx.run_dir)))
    for row in spearman_rows:
        if "reference_rho" in row and row.get("rho") != "":
            print(
                f"[report] spearman {row['corpus']}/{row['metric']}: "
                f"rho={row['rho']:.3f} p={row['p']:.3g} "
                f"(reference rho {row['reference_rho']})"
            )

    for corpus in sorted({v["corpus"] for v in verdicts}):
        for model in sorted({v["model"] for v in verdicts if v["corpus"] == corpus}):
            for metric in judging.METRICS:
                subset = [
                    v for v in verdicts if v["corpus"] == corpus and v["model"] == model
                ]
                figure = out_dir / f"scores_{corpus}_{model}_{metric}.svg"
                plots.render_score_distribution(subset, metric, corpus, model, figure)
                artifacts.append(str(figure.relative_to(ctx.run_dir)))

    report_payload = {
        "summary": summary_rows,
        "pr_pooled": pooled_pr,
        "spearman": spearman_rows,
        "icc": ctx.manifest.stage("judge").stats.get("icc", []),
    }
    report_path = out_dir / "report.json"
    _write_json(report_path, report_payload)
    artifacts.append(str(report_path.relative_to(ctx.run_dir)))

    _finish_stage(
        ctx,
        "report",
        {"artifacts": artifacts, "warnings": [], "failures": [], "stats": {"rows": len(summary_rows)}},
    )
    return {"summary_rows": len(summary_rows)}
