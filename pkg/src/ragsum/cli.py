"""Command-line interface for the summarization pipeline."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import load_config, config_hash
from .errors import RagsumError
from .manifest import RunCounters, file_sha256, update_manifest
from .pipeline import ProviderSet, STAGES, run_all, run_stage
from .report import write_report


def _echo_stage(result) -> None:
    click.echo(
        f"{result.stage}: {len(result.completed)} task(s) completed, "
        f"{len(result.failed)} failed ({result.seconds:.2f}s)"
    )
    for task_id, reason in sorted(result.failed.items()):
        click.echo(f"  failed {task_id}: {reason}", err=True)


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(exists=True),
    help="Pipeline configuration file (YAML).",
)
out_option = click.option(
    "--out", "out_dir", required=True, type=click.Path(),
    help="Run directory holding stage artifacts.",
)
task_option = click.option(
    "--task", "tasks", multiple=True, help="Restrict to these task ids (repeatable)."
)
force_option = click.option(
    "--force", is_flag=True, help="Ignore config-hash mismatches with earlier stages."
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool) -> None:
    """Retrieval-augmented survey-section summarization pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)


def _run_single_stage(stage, config_path, out_dir, dataset=None, tasks=(), force=False):
    cfg = load_config(config_path)
    counters = RunCounters()
    providers = None if stage == "ingest" else ProviderSet.from_config(cfg)
    try:
        result = run_stage(
            stage,
            cfg,
            out_dir,
            dataset=dataset,
            providers=providers,
            tasks=list(tasks) or None,
            force=force,
            counters=counters,
        )
    except RagsumError as exc:
        raise click.ClickException(str(exc)) from exc
    dataset_info = (
        {"path": str(dataset), "sha256": file_sha256(dataset)} if dataset else None
    )
    update_manifest(
        out_dir,
        config_hash=config_hash(cfg),
        dataset=dataset_info,
        stage_updates={stage: result.to_manifest()},
        provider_calls=providers.stats() if providers else {},
        counters=counters,
    )
    _echo_stage(result)
    if result.failed:
        sys.exit(1)


@main.command()
@config_option
@click.option("--dataset", required=True, type=click.Path(exists=True))
@out_option
@force_option
def ingest(config_path, dataset, out_dir, force):
    """Load the task file and chunk every paper."""
    _run_single_stage("ingest", config_path, out_dir, dataset=dataset, force=force)


def _stage_command(stage: str, doc: str):
    @main.command(name=stage, help=doc)
    @config_option
    @out_option
    @task_option
    @force_option
    def _cmd(config_path, out_dir, tasks, force):
        _run_single_stage(stage, config_path, out_dir, tasks=tasks, force=force)

    return _cmd


_stage_command("questions", "Generate retrieval questions for every paper.")
_stage_command("answer", "Retrieve, rerank, and answer every question.")
_stage_command("summarize", "Compose one cited summary per task.")
_stage_command("evaluate", "Score summaries against ground truth.")


@main.command(name="run-all")
@config_option
@click.option("--dataset", required=True, type=click.Path(exists=True))
@out_option
@task_option
@force_option
def run_all_cmd(config_path, dataset, out_dir, tasks, force):
    """Run every stage in order and write the manifest."""
    cfg = load_config(config_path)
    try:
        result = run_all(
            cfg, dataset, out_dir, tasks=list(tasks) or None, force=force
        )
    except RagsumError as exc:
        raise click.ClickException(str(exc)) from exc
    for stage in STAGES:
        _echo_stage(result.stages[stage])
    click.echo(f"manifest: {Path(out_dir) / 'manifest.json'}")


@main.command()
@out_option
def report(out_dir):
    """Render the score table (CSV) and figures from an evaluated run."""
    try:
        written = write_report(out_dir)
    except RagsumError as exc:
        raise click.ClickException(str(exc)) from exc
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
