"""Command line interface: the five pipeline stages plus a partition-file
validator, all driven by one config document."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .chunking import ChunkingError, load_human_partition
from .config import ConfigError, load_config
from .corpus import from_prepared_json
from .manifest import ManifestError


def _stage_options(command):
    for option in (
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True), help="Pipeline config (.yaml/.json)."),
        click.option("--run-id", default=None, help="Run directory name; defaults to a config-derived id."),
        click.option("--dry-run", is_flag=True, help="Describe the work without doing it."),
        click.option("--resume", is_flag=True, help="Skip the stage if it already completed."),
        click.option("--allow-partial", is_flag=True,
                     help="Exit 0 even when the stage recorded failures."),
    ):
        command = option(command)
    return command


def _run_stage(stage_name, config_path, run_id, dry_run, resume, allow_partial, runner):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(config_path)
        ctx = pipeline.make_run_context(config, run_id)
        runner(ctx)
    except (ConfigError, ManifestError, pipeline.StageError, ChunkingError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    if dry_run:
        return
    failures = ctx.manifest.stage(stage_name).failures
    if failures:
        click.echo(f"[{stage_name}] {len(failures)} failures recorded:", err=True)
        for failure in failures[:10]:
            click.echo(f"  - {failure}", err=True)
        if not allow_partial:
            sys.exit(1)


@click.group()
@click.version_option(package_name="chunkdoc")
def main() -> None:
    """Chunk legacy source files, generate module comments, and judge them."""


@main.command()
@_stage_options
def prepare(config_path, run_id, dry_run, resume, allow_partial):
    """Strip comments, detect modules, insert markers, emit corpus stats."""
    _run_stage(
        "prepare", config_path, run_id, dry_run, resume, allow_partial,
        lambda ctx: pipeline.cmd_prepare(ctx, resume=resume, dry_run=dry_run),
    )


@main.command()
@_stage_options
def partition(config_path, run_id, dry_run, resume, allow_partial):
    """Produce all 16 chunking variants per prepared file."""
    _run_stage(
        "partition", config_path, run_id, dry_run, resume, allow_partial,
        lambda ctx: pipeline.cmd_partition(ctx, resume=resume, dry_run=dry_run),
    )


@main.command()
@_stage_options
@click.option("--n-comments", type=int, default=None,
              help="Dry-run override: total module comments in the grid.")
@click.option("--n-models", type=int, default=None,
              help="Dry-run override: generator model count.")
@click.option("--n-methods", type=int, default=None,
              help="Dry-run override: chunking method count.")
@click.option("--coverage", type=int, default=None,
              help="Dry-run override: judge repetitions per comment.")
def generate(config_path, run_id, dry_run, resume, allow_partial,
             n_comments, n_models, n_methods, coverage):
    """Generate module comments for every (file, variant, model) condition."""
    override = {
        key: value
        for key, value in (
            ("n_comments", n_comments),
            ("n_models", n_models),
            ("n_methods", n_methods),
            ("coverage", coverage),
        )
        if value is not None
    }
    _run_stage(
        "generate", config_path, run_id, dry_run, resume, allow_partial,
        lambda ctx: pipeline.cmd_generate(
            ctx, resume=resume, dry_run=dry_run, grid_override=override or None
        ),
    )


@main.command()
@_stage_options
def judge(config_path, run_id, dry_run, resume, allow_partial):
    """Judge merged comments with repeated windowed evaluations."""
    _run_stage(
        "judge", config_path, run_id, dry_run, resume, allow_partial,
        lambda ctx: pipeline.cmd_judge(ctx, resume=resume, dry_run=dry_run),
    )


@main.command()
@_stage_options
def report(config_path, run_id, dry_run, resume, allow_partial):
    """Write summary tables, correlation tables, and figures."""
    _run_stage(
        "report", config_path, run_id, dry_run, resume, allow_partial,
        lambda ctx: pipeline.cmd_report(ctx, resume=resume, dry_run=dry_run),
    )


@main.command("validate-human")
@click.argument("prepared_json", type=click.Path(exists=True))
@click.argument("partition_json", type=click.Path(exists=True))
def validate_human(prepared_json, partition_json):
    """Check a human partition file against its prepared source file."""
    import json

    file = from_prepared_json(json.loads(Path(prepared_json).read_text(encoding="utf-8")))
    payload = json.loads(Path(partition_json).read_text(encoding="utf-8"))
    try:
        result = load_human_partition(file, payload)
    except ChunkingError as exc:
        click.echo(f"invalid: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"ok: {len(result.split_points)} split points over "
        f"{file.line_count} lines of {file.path}"
    )


if __name__ == "__main__":
    main()
