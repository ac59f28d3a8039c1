"""Run manifest: reproducibility record written atomically at the end of a run."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_NAME = "manifest.json"

RETRY_POLICY = {
    "retries": 3,
    "backoff_base_ms": 500,
    "jitter": "uniform(0, backoff/2)",
}


class RunCounters:
    """Thread-safe event counters and the stripped-citation log for one run."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}
        self._stripped: list[dict[str, str]] = []

    def bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            self._counts[name] = self._counts.get(name, 0) + by

    def log_stripped(self, where: str, key: str) -> None:
        with self._lock:
            self._stripped.append({"where": where, "key": key})

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def stripped(self) -> list[dict[str, str]]:
        with self._lock:
            return sorted(self._stripped, key=lambda r: (r["where"], r["key"]))


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _derive_from_artifacts(run_dir: Path) -> dict:
    """Recount abstentions and stripped markers from what is actually on disk."""
    derived: dict = {"abstention_count": 0, "stripped_citations": []}
    answers = run_dir / "answers.jsonl"
    if answers.exists():
        for line in answers.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("abstained"):
                derived["abstention_count"] += 1
            for key in record.get("stripped", []):
                derived["stripped_citations"].append(
                    {"where": record["question_id"], "key": key}
                )
    summaries = run_dir / "summaries"
    if summaries.is_dir():
        for sidecar in sorted(summaries.glob("*.json")):
            record = json.loads(sidecar.read_text(encoding="utf-8"))
            for key in record.get("stripped_markers", []):
                derived["stripped_citations"].append(
                    {"where": record["task_id"], "key": key}
                )
    derived["stripped_citations"].sort(key=lambda r: (r["where"], r["key"]))
    return derived


def _artifact_list(run_dir: Path) -> list[str]:
    names = []
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != MANIFEST_NAME and path.suffix != ".tmp":
            names.append(str(path.relative_to(run_dir)))
    return names


def update_manifest(
    run_dir: str | Path,
    *,
    config_hash: str,
    dataset: dict | None = None,
    stage_updates: dict | None = None,
    provider_calls: dict | None = None,
    counters: RunCounters | None = None,
) -> dict:
    """Merge this invocation's results into manifest.json and rewrite it atomically."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    manifest["config_hash"] = config_hash
    manifest["retry_policy"] = RETRY_POLICY
    if dataset is not None:
        manifest["dataset"] = dataset
    stages = manifest.setdefault("stages", {})
    for name, update in (stage_updates or {}).items():
        stages[name] = update
    if provider_calls:
        calls = manifest.setdefault("provider_calls", {})
        for stage, stats in provider_calls.items():
            slot = calls.setdefault(stage, {"calls": 0, "retries": 0})
            slot["calls"] += stats.get("calls", 0)
            slot["retries"] += stats.get("retries", 0)
    if counters is not None:
        merged = manifest.setdefault("counters", {})
        for name, value in counters.counts().items():
            merged[name] = merged.get(name, 0) + value
    manifest.update(_derive_from_artifacts(run_dir))
    manifest["artifacts"] = _artifact_list(run_dir)
    manifest["updated_utc"] = _utc_now()
    _write_atomic(run_dir / MANIFEST_NAME, manifest)
    return manifest
