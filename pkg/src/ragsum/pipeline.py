"""Stage orchestration: ingest -> questions -> answer -> summarize -> evaluate.

Every stage persists plain JSONL artifacts into the run directory and is
independently resumable from them. Stage metadata records the config hash so
a rerun under a changed configuration is refused unless forced. Task
failures are isolated: one failing task is recorded and the rest proceed.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus, editor, evalsuite, question_gen, retrieval_qa
from .config import PipelineConfig, config_hash
from .corpus import Chunk, Paper, SurveyTask
from .errors import (
    AllAbstained,
    ConfigMismatch,
    InvalidConfig,
    MissingArtifact,
    RagsumError,
)
from .manifest import RunCounters, file_sha256, update_manifest
from .providers import (
    GenerationSettings,
    make_chat_provider,
    make_embedding_provider,
)
from .question_gen import GeneratedQuestion
from .vector_index import IndexEntry, VectorIndex

logger = logging.getLogger(__name__)

STAGES = ("ingest", "questions", "answer", "summarize", "evaluate")

_STAGE_REQUIRES = {
    "ingest": None,
    "questions": "ingest",
    "answer": "questions",
    "summarize": "answer",
    "evaluate": "summarize",
}


@dataclass
class ProviderSet:
    question: object
    answer: object
    editor: object
    judge: object | None
    embeddings: object

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "ProviderSet":
        pm = cfg.providers
        return cls(
            question=make_chat_provider(pm.question),
            answer=make_chat_provider(pm.answer),
            editor=make_chat_provider(pm.editor),
            judge=make_chat_provider(pm.judge) if pm.judge is not None else None,
            embeddings=make_embedding_provider(pm.embeddings),
        )

    def stats(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in ("question", "answer", "editor", "judge", "embeddings"):
            provider = getattr(self, name)
            if provider is not None and hasattr(provider, "stats"):
                out[name] = provider.stats.snapshot()
        return out


@dataclass
class StageResult:
    stage: str
    completed: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0

    def to_manifest(self) -> dict:
        return {
            "seconds": round(self.seconds, 3),
            "completed_tasks": self.completed,
            "failed_tasks": self.failed,
            "notes": self.notes,
        }


class _ScopedCounters:
    """Counters adapter pinning the stripped-citation location to one label."""

    def __init__(self, inner: RunCounters | None, where: str):
        self._inner = inner
        self._where = where

    def bump(self, name: str, by: int = 1) -> None:
        if self._inner is not None:
            self._inner.bump(name, by)

    def log_stripped(self, _where: str, key: str) -> None:
        if self._inner is not None:
            self._inner.log_stripped(self._where, key)


def _bounded_map(fn, items, limit: int):
    """Apply fn to items, at most `limit` at a time; results in input order."""
    items = list(items)
    if limit <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=limit) as pool:
        futures = [pool.submit(fn, item) for item in items]
        return [f.result() for f in futures]


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def _merge_records(
    path: Path, new_records: list[dict], replaced: set[str], sort_key
) -> list[dict]:
    """Replace records of the tasks completed this run; keep everything else.

    Task-filtered invocations thereby extend an artifact batch by batch, and a
    task failing transiently does not erase the records of an earlier
    successful run under the same config hash.
    """
    kept = []
    if path.exists():
        kept = [
            r
            for r in _read_jsonl(path)
            if r["task_id"] not in replaced and r["task_id"] != "aggregate"
        ]
    merged = kept + new_records
    merged.sort(key=sort_key)
    return merged


def _meta_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "meta" / f"{stage}.json"


def _write_meta(run_dir: Path, stage: str, cfg_hash: str, result: StageResult) -> None:
    payload = {
        "stage": stage,
        "config_hash": cfg_hash,
        "completed_tasks": result.completed,
        "failed_tasks": result.failed,
        "notes": result.notes,
    }
    path = _meta_path(run_dir, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_prerequisite(run_dir: Path, stage: str, cfg_hash: str, force: bool) -> None:
    required = _STAGE_REQUIRES[stage]
    if required is None:
        return
    meta_file = _meta_path(run_dir, required)
    if not meta_file.exists():
        raise MissingArtifact(required)
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    if meta.get("config_hash") != cfg_hash and not force:
        raise ConfigMismatch(
            f"artifacts for stage '{required}' were produced under config "
            f"{meta.get('config_hash', '?')[:12]}, current is {cfg_hash[:12]}; "
            "rerun earlier stages or pass force"
        )


def _settings_for(cfg: PipelineConfig, stage: str) -> GenerationSettings:
    provider_cfg = getattr(cfg.providers, stage)
    return GenerationSettings(
        model=provider_cfg.model, temperature=cfg.temperature, top_p=cfg.top_p
    )


def _selected(records: list[dict], tasks: list[str] | None) -> list[dict]:
    if tasks is None:
        return records
    wanted = set(tasks)
    return [r for r in records if r["task_id"] in wanted]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_ingest(cfg: PipelineConfig, dataset: str | Path, run_dir: Path) -> StageResult:
    result = StageResult("ingest")
    loaded = corpus.read_task_file(dataset)
    failed_idx = {f.task_index: f.reason for f in loaded.failed}
    total = len(loaded.tasks) + len(loaded.failed)
    live_ids = [f"t{i:03d}" for i in range(total) if i not in failed_idx]

    task_records: list[dict] = []
    chunk_records: list[dict] = []
    for task_id, task in zip(live_ids, loaded.tasks):
        try:
            chunks: list[dict] = []
            for paper in task.papers:
                for chunk in corpus.chunk_document(paper, cfg.chunk):
                    chunks.append(
                        {
                            "task_id": task_id,
                            "chunk_id": chunk.chunk_id,
                            "paper_id": chunk.paper_id,
                            "bibref_key": chunk.bibref_key,
                            "text": chunk.text,
                            "token_start": chunk.token_start,
                            "token_end": chunk.token_end,
                            "token_count": chunk.token_count,
                        }
                    )
        except RagsumError as exc:
            result.failed[task_id] = str(exc)
            continue
        task_records.append(
            {
                "task_id": task_id,
                "survey_title": task.survey_title,
                "section_title": task.section_title,
                "ground_truth_text": task.ground_truth_text,
                "papers": [
                    {
                        "paper_id": p.paper_id,
                        "bibref_key": p.bibref_key,
                        "title": p.title,
                        "abstract": p.abstract,
                    }
                    for p in task.papers
                ],
            }
        )
        chunk_records.extend(chunks)
        result.completed.append(task_id)

    for index, reason in sorted(failed_idx.items()):
        result.failed[f"t{index:03d}"] = reason
    for record in loaded.excluded:
        result.notes[f"t{record.task_index:03d}/{record.paper_id}"] = (
            f"paper excluded: {record.reason}"
        )

    _write_jsonl(run_dir / "tasks.jsonl", task_records)
    _write_jsonl(run_dir / "chunks.jsonl", chunk_records)
    return result


def _stage_questions(
    cfg: PipelineConfig,
    run_dir: Path,
    providers: ProviderSet,
    tasks: list[str] | None,
    counters: RunCounters | None,
) -> StageResult:
    result = StageResult("questions")
    task_records = _selected(_read_jsonl(run_dir / "tasks.jsonl"), tasks)
    settings = _settings_for(cfg, "question")

    records: list[dict] = []
    for task in task_records:
        task_id = task["task_id"]
        papers = [
            Paper(p["paper_id"], p["bibref_key"], p["title"], p["abstract"], "")
            for p in task["papers"]
        ]
        try:
            per_paper = _bounded_map(
                lambda paper: question_gen.generate_questions(
                    paper, cfg.k_questions, providers.question,
                    settings=settings, counters=counters,
                ),
                papers,
                cfg.concurrency,
            )
        except RagsumError as exc:
            result.failed[task_id] = str(exc)
            continue
        for questions in per_paper:
            for q in questions:
                records.append(
                    {
                        "task_id": task_id,
                        "question_id": q.question_id,
                        "paper_id": q.paper_id,
                        "index": q.index,
                        "text": q.text,
                    }
                )
        result.completed.append(task_id)

    path = run_dir / "questions.jsonl"
    # stable sort preserves pipeline order (paper order, index) within a task
    _write_jsonl(
        path,
        _merge_records(path, records, set(result.completed), lambda r: r["task_id"]),
    )
    return result


def _group_by_task(records: list[dict]) -> dict[str, list[dict]]:
    grouped: dict[str, list[dict]] = {}
    for record in records:
        grouped.setdefault(record["task_id"], []).append(record)
    return grouped


def _stage_answer(
    cfg: PipelineConfig,
    run_dir: Path,
    providers: ProviderSet,
    tasks: list[str] | None,
    counters: RunCounters | None,
) -> StageResult:
    result = StageResult("answer")
    chunk_records = _group_by_task(_selected(_read_jsonl(run_dir / "chunks.jsonl"), tasks))
    question_records = _group_by_task(
        _selected(_read_jsonl(run_dir / "questions.jsonl"), tasks)
    )
    settings = _settings_for(cfg, "answer")

    retrieval_out: list[dict] = []
    answer_out: list[dict] = []
    for task_id in sorted(question_records):
        # Question ids repeat across tasks when paper ids do, so stripped
        # markers are collected into a task-local log, not the run-wide one;
        # the manifest recounts them from the artifacts.
        local_counters = RunCounters()
        try:
            chunks = {
                r["chunk_id"]: Chunk(
                    chunk_id=r["chunk_id"],
                    paper_id=r["paper_id"],
                    bibref_key=r["bibref_key"],
                    text=r["text"],
                    token_start=r["token_start"],
                    token_end=r["token_end"],
                )
                for r in chunk_records.get(task_id, [])
            }
            if not chunks:
                result.failed[task_id] = "no chunks available"
                continue
            index = VectorIndex()
            embeddings = _bounded_map(
                lambda c: providers.embeddings.embed_passage(c.text),
                chunks.values(),
                cfg.concurrency,
            )
            index.add(
                [
                    IndexEntry(chunk.chunk_id, vec)
                    for chunk, vec in zip(chunks.values(), embeddings)
                ]
            )
            index.freeze()
            chunk_texts = {cid: c.text for cid, c in chunks.items()}
            token_cache: dict = {}

            questions = [
                GeneratedQuestion(r["question_id"], r["paper_id"], r["index"], r["text"])
                for r in question_records[task_id]
            ]

            def answer_one(question: GeneratedQuestion) -> tuple[dict, dict]:
                stage1 = retrieval_qa.retrieve_stage1(
                    question, index, providers.embeddings, cfg.stage1_n
                )
                stage2 = retrieval_qa.rerank(
                    question, stage1, chunk_texts, providers.embeddings,
                    cfg.stage2_m, token_cache=token_cache,
                )
                answer = retrieval_qa.generate_answer(
                    question,
                    [chunks[h.chunk_id] for h in stage2],
                    providers.answer,
                    settings=settings,
                    counters=local_counters,
                )
                retrieval_record = {
                    "task_id": task_id,
                    "question_id": question.question_id,
                    "stage1": [[h.chunk_id, h.score] for h in stage1],
                    "stage2": [[h.chunk_id, h.score] for h in stage2],
                }
                answer_record = {
                    "task_id": task_id,
                    "question_id": answer.question_id,
                    "text": answer.text,
                    "cited_bibrefs": sorted(answer.cited_bibrefs),
                    "abstained": answer.abstained,
                    "used_chunk_ids": list(answer.used_chunk_ids),
                }
                return retrieval_record, answer_record

            # The shared token cache makes concurrent rerank calls redundant
            # rather than wrong (pure providers); results stay deterministic.
            pairs = _bounded_map(answer_one, questions, cfg.concurrency)
        except RagsumError as exc:
            result.failed[task_id] = str(exc)
            continue

        stripped_by_question: dict[str, list[str]] = {}
        for entry in local_counters.stripped():
            stripped_by_question.setdefault(entry["where"], []).append(entry["key"])
        for retrieval_record, answer_record in pairs:
            answer_record["stripped"] = sorted(
                set(stripped_by_question.get(answer_record["question_id"], []))
            )
            retrieval_out.append(retrieval_record)
            answer_out.append(answer_record)
        result.completed.append(task_id)

    def by_question(record: dict) -> tuple[str, str]:
        return record["task_id"], record["question_id"]

    replaced = set(result.completed)
    retrieval_path = run_dir / "retrieval.jsonl"
    answers_path = run_dir / "answers.jsonl"
    _write_jsonl(
        retrieval_path, _merge_records(retrieval_path, retrieval_out, replaced, by_question)
    )
    _write_jsonl(
        answers_path, _merge_records(answers_path, answer_out, replaced, by_question)
    )
    return result


def _stage_summarize(
    cfg: PipelineConfig,
    run_dir: Path,
    providers: ProviderSet,
    tasks: list[str] | None,
    counters: RunCounters | None,
) -> StageResult:
    result = StageResult("summarize")
    task_records = {r["task_id"]: r for r in _selected(_read_jsonl(run_dir / "tasks.jsonl"), tasks)}
    question_records = _group_by_task(
        _selected(_read_jsonl(run_dir / "questions.jsonl"), tasks)
    )
    answer_records = _group_by_task(_selected(_read_jsonl(run_dir / "answers.jsonl"), tasks))
    settings = _settings_for(cfg, "editor")
    out_dir = run_dir / "summaries"
    out_dir.mkdir(parents=True, exist_ok=True)

    for task_id in sorted(answer_records):
        record = task_records.get(task_id)
        if record is None:
            continue
        task = SurveyTask(
            survey_title=record["survey_title"],
            section_title=record["section_title"],
            ground_truth_text=record.get("ground_truth_text"),
            papers=(),
        )
        answers_by_id = {
            r["question_id"]: retrieval_qa.Answer(
                question_id=r["question_id"],
                text=r["text"],
                cited_bibrefs=frozenset(r["cited_bibrefs"]),
                abstained=r["abstained"],
                used_chunk_ids=tuple(r["used_chunk_ids"]),
            )
            for r in answer_records[task_id]
        }
        qa_pairs = []
        for q_record in question_records.get(task_id, []):
            answer = answers_by_id.get(q_record["question_id"])
            if answer is not None:
                question = GeneratedQuestion(
                    q_record["question_id"], q_record["paper_id"],
                    q_record["index"], q_record["text"],
                )
                qa_pairs.append((question, answer))

        local_counters = RunCounters()
        try:
            summary = editor.compose_summary(
                task,
                qa_pairs,
                providers.editor,
                settings=settings,
                counters=_ScopedCounters(local_counters, task_id),
            )
        except (AllAbstained, RagsumError) as exc:
            result.failed[task_id] = str(exc)
            continue

        stripped = sorted({entry["key"] for entry in local_counters.stripped()})
        abstained_count = sum(1 for _, a in qa_pairs if a.abstained)
        (out_dir / f"{task_id}.txt").write_text(summary.text + "\n", encoding="utf-8")
        sidecar = {
            "task_id": task_id,
            "task_ref": summary.task_ref,
            "citations": sorted(summary.citations),
            "qa_count_used": summary.qa_count_used,
            "abstention_count": abstained_count,
            "stripped_markers": stripped,
        }
        (out_dir / f"{task_id}.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        result.completed.append(task_id)
    return result


_MEAN_FIELDS = (
    "rouge1_recall",
    "rouge2_recall",
    "rougeL_recall",
    "ref_precision",
    "ref_recall",
    "ref_f1",
    "embed_recall",
    "geval",
    "checkeval",
)


def _stage_evaluate(
    cfg: PipelineConfig,
    run_dir: Path,
    providers: ProviderSet,
    tasks: list[str] | None,
    counters: RunCounters | None,
) -> StageResult:
    result = StageResult("evaluate")
    task_records = {r["task_id"]: r for r in _selected(_read_jsonl(run_dir / "tasks.jsonl"), tasks)}
    cfg_hash = config_hash(cfg)
    judge_settings = (
        _settings_for(cfg, "judge") if cfg.providers.judge is not None else None
    )

    records: list[dict] = []
    for task_id in sorted(task_records):
        summary_file = run_dir / "summaries" / f"{task_id}.txt"
        if not summary_file.exists():
            continue
        ground_truth = task_records[task_id].get("ground_truth_text")
        if not ground_truth:
            result.notes[task_id] = "no ground truth; score report absent"
            continue
        try:
            report = evalsuite.score_summary(
                summary_file.read_text(encoding="utf-8").strip(),
                ground_truth,
                providers.embeddings,
                judge=providers.judge,
                checklist_size=cfg.checklist_size,
                judge_settings=judge_settings,
            )
        except RagsumError as exc:
            result.failed[task_id] = str(exc)
            continue
        records.append({"task_id": task_id, "config_hash": cfg_hash, **report.to_dict()})
        result.completed.append(task_id)

    path = run_dir / "scores.jsonl"
    merged = _merge_records(
        path, records, set(result.completed), lambda r: r["task_id"]
    )
    if merged:
        aggregate: dict = {"task_id": "aggregate", "config_hash": cfg_hash}
        for name in _MEAN_FIELDS:
            values = [r[name] for r in merged if r.get(name) is not None]
            aggregate[name] = sum(values) / len(values) if values else None
        merged.append(aggregate)
    _write_jsonl(path, merged)
    return result


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def run_stage(
    stage: str,
    cfg: PipelineConfig,
    run_dir: str | Path,
    *,
    dataset: str | Path | None = None,
    providers: ProviderSet | None = None,
    tasks: list[str] | None = None,
    force: bool = False,
    counters: RunCounters | None = None,
) -> StageResult:
    """Run one pipeline stage against the artifacts in run_dir."""
    if stage not in STAGES:
        raise InvalidConfig(f"unknown stage {stage!r}; expected one of {STAGES}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)
    _check_prerequisite(run_dir, stage, cfg_hash, force)

    started = time.monotonic()
    if stage == "ingest":
        if dataset is None:
            raise InvalidConfig("ingest requires a dataset path")
        result = _stage_ingest(cfg, dataset, run_dir)
    else:
        if providers is None:
            providers = ProviderSet.from_config(cfg)
        runner = {
            "questions": _stage_questions,
            "answer": _stage_answer,
            "summarize": _stage_summarize,
            "evaluate": _stage_evaluate,
        }[stage]
        result = runner(cfg, run_dir, providers, tasks, counters)
    result.seconds = time.monotonic() - started
    _write_meta(run_dir, stage, cfg_hash, result)
    logger.info(
        "stage %s: %d completed, %d failed in %.2fs",
        stage, len(result.completed), len(result.failed), result.seconds,
    )
    return result


@dataclass
class RunResult:
    stages: dict[str, StageResult]
    manifest: dict


def run_all(
    cfg: PipelineConfig,
    dataset: str | Path,
    run_dir: str | Path,
    *,
    providers: ProviderSet | None = None,
    tasks: list[str] | None = None,
    force: bool = False,
) -> RunResult:
    """Run every stage in order and write the manifest."""
    run_dir = Path(run_dir)
    if providers is None:
        providers = ProviderSet.from_config(cfg)
    counters = RunCounters()
    results: dict[str, StageResult] = {}
    for stage in STAGES:
        results[stage] = run_stage(
            stage,
            cfg,
            run_dir,
            dataset=dataset if stage == "ingest" else None,
            providers=providers,
            tasks=tasks,
            force=force,
            counters=counters,
        )
    manifest = update_manifest(
        run_dir,
        config_hash=config_hash(cfg),
        dataset={"path": str(dataset), "sha256": file_sha256(dataset)},
        stage_updates={name: r.to_manifest() for name, r in results.items()},
        provider_calls=providers.stats(),
        counters=counters,
    )
    return RunResult(stages=results, manifest=manifest)
