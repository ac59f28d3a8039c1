"""Score reporting: delimited per-task table plus rendered figures.

Reads scores.jsonl from a run directory and writes a CSV whose columns follow
the usual summarization leaderboard layout, together with PNG figures for the
per-metric means and the per-task breakdown.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import MissingArtifact

# (record field, report column) in leaderboard order; embed_recall plays the
# BERTScore-recall role and is labelled for what it is here.
COLUMNS = (
    ("rouge1_recall", "ROUGE-1"),
    ("rouge2_recall", "ROUGE-2"),
    ("rougeL_recall", "ROUGE-L"),
    ("embed_recall", "EmbedRecall"),
    ("ref_f1", "Ref-F1"),
    ("geval", "G-Eval"),
    ("checkeval", "CheckEval"),
)

_UNIT_SCALE = [c for c, _ in COLUMNS if c != "geval"]


def _load_scores(run_dir: Path) -> list[dict]:
    path = run_dir / "scores.jsonl"
    if not path.exists():
        raise MissingArtifact("evaluate")
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def _fmt(value) -> str:
    return "" if value is None else f"{value:.4f}"


def write_report(run_dir: str | Path, out_subdir: str = "report") -> list[Path]:
    """Write scores.csv and the score figures; returns the paths written."""
    run_dir = Path(run_dir)
    records = _load_scores(run_dir)
    out_dir = run_dir / out_subdir
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_path = out_dir / "scores.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id"] + [label for _, label in COLUMNS])
        for record in records:
            writer.writerow([record["task_id"]] + [_fmt(record.get(f)) for f, _ in COLUMNS])
    written.append(csv_path)

    aggregate = next((r for r in records if r["task_id"] == "aggregate"), None)
    tasks = [r for r in records if r["task_id"] != "aggregate"]

    if aggregate is not None:
        written.append(_mean_figure(aggregate, out_dir / "metric_means.png"))
    if tasks:
        written.append(_task_figure(tasks, out_dir / "task_scores.png"))
    return written


def _mean_figure(aggregate: dict, path: Path) -> Path:
    unit_labels = [label for f, label in COLUMNS if f != "geval" and aggregate.get(f) is not None]
    unit_values = [aggregate[f] for f, _ in COLUMNS if f != "geval" and aggregate.get(f) is not None]
    geval = aggregate.get("geval")

    ncols = 2 if geval is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(2 + 1.2 * len(unit_labels) + 2 * (ncols - 1), 4))
    ax0 = axes[0] if ncols == 2 else axes
    ax0.bar(unit_labels, unit_values, color="#4878a8")
    ax0.set_ylim(0, 1.05)
    ax0.set_ylabel("score")
    ax0.set_title("Mean scores (0-1 scale)")
    ax0.tick_params(axis="x", rotation=30)
    if geval is not None:
        ax1 = axes[1]
        ax1.bar(["G-Eval"], [geval], color="#a85448")
        ax1.set_ylim(0, 5.25)
        ax1.set_title("Mean judge rating (1-5)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _task_figure(tasks: list[dict], path: Path) -> Path:
    labels = [r["task_id"] for r in tasks]
    fields = [f for f in _UNIT_SCALE if any(r.get(f) is not None for r in tasks)]
    width = 0.8 / max(len(fields), 1)
    fig, ax = plt.subplots(figsize=(2 + 1.5 * len(labels), 4))
    for i, field in enumerate(fields):
        xs = [j + i * width for j in range(len(labels))]
        ys = [r.get(field) or 0.0 for r in tasks]
        label = dict(COLUMNS)[field]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks([j + width * (len(fields) - 1) / 2 for j in range(len(labels))])
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("Per-task scores (0-1 scale)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
