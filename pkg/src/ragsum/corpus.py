"""Survey task loading and sentence-aligned, overlapping token chunking.

Texts are tokenized with a deterministic, model-independent rule: maximal
runs of alphanumeric characters form one token, every other non-whitespace
character is a token of its own. Token text is lowercased for metric use;
byte spans always reference the original UTF-8 encoding.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfig, ParseError, ValidationError

logger = logging.getLogger(__name__)

BIBREF_KEY_RE = re.compile(r"^BIBREF\d+$")

_TOKEN_RE = re.compile(r"[^\W_]+|\S", re.UNICODE)

# A sentence ends at `.`, `!` or `?` followed by whitespace and an uppercase
# ASCII letter or digit, unless the text so far ends in a guarded abbreviation.
_BOUNDARY_RE = re.compile(r"[.!?](?=\s+[A-Z0-9])")
_ABBREVIATIONS = ("e.g.", "i.e.", "et al.", "fig.", "vs.", "dr.")


@dataclass(frozen=True)
class Token:
    """One token: lowercased text plus its byte span in the source."""

    text: str
    byte_start: int
    byte_end: int


@dataclass(frozen=True)
class Paper:
    paper_id: str
    bibref_key: str
    title: str
    abstract: str
    full_text: str


@dataclass(frozen=True)
class SurveyTask:
    survey_title: str
    section_title: str
    ground_truth_text: str | None
    papers: tuple[Paper, ...]


@dataclass(frozen=True)
class ChunkConfig:
    target_tokens: int = 150
    overlap_tokens: int = 20

    def __post_init__(self) -> None:
        if self.target_tokens < 1:
            raise InvalidConfig(f"target_tokens must be >= 1, got {self.target_tokens}")
        if not 0 <= self.overlap_tokens < self.target_tokens:
            raise InvalidConfig(
                f"overlap_tokens must satisfy 0 <= overlap < target, got "
                f"overlap={self.overlap_tokens} target={self.target_tokens}"
            )


@dataclass(frozen=True)
class Chunk:
    """A contiguous token slice of one paper, carrying provenance."""

    chunk_id: str
    paper_id: str
    bibref_key: str
    text: str
    token_start: int
    token_end: int

    @property
    def token_count(self) -> int:
        return self.token_end - self.token_start


@dataclass(frozen=True)
class ExcludedPaper:
    task_index: int
    paper_id: str
    reason: str


@dataclass(frozen=True)
class FailedTask:
    task_index: int
    reason: str


@dataclass
class LoadedTasks:
    """Parsed task file: valid tasks plus the per-record exclusion report."""

    tasks: list[SurveyTask] = field(default_factory=list)
    excluded: list[ExcludedPaper] = field(default_factory=list)
    failed: list[FailedTask] = field(default_factory=list)


def _byte_offsets(text: str) -> list[int]:
    """offsets[i] = byte offset of character i in UTF-8; len(text)+1 entries."""
    offsets = [0] * (len(text) + 1)
    pos = 0
    for i, ch in enumerate(text):
        offsets[i] = pos
        pos += len(ch.encode("utf-8"))
    offsets[len(text)] = pos
    return offsets


def tokenize(text: str) -> list[Token]:
    """Split text into lowercased tokens with byte spans; deterministic."""
    offsets = _byte_offsets(text)
    return [
        Token(m.group().lower(), offsets[m.start()], offsets[m.end()])
        for m in _TOKEN_RE.finditer(text)
    ]


def _guarded(text: str, term_idx: int) -> bool:
    """True when the terminator at term_idx ends a guarded abbreviation."""
    head = text[: term_idx + 1].lower()
    for abbr in _ABBREVIATIONS:
        if head.endswith(abbr):
            prev = term_idx - len(abbr)
            if prev < 0 or not head[prev].isalnum():
                return True
    return False


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Byte spans of sentences; spans partition the non-whitespace content."""
    if not text:
        return []
    boundaries = [
        m.start() for m in _BOUNDARY_RE.finditer(text) if not _guarded(text, m.start())
    ]
    offsets = _byte_offsets(text)
    spans: list[tuple[int, int]] = []
    seg_start = 0
    for end in boundaries + [len(text) - 1]:
        seg = text[seg_start : end + 1]
        lead = len(seg) - len(seg.lstrip())
        trail = len(seg) - len(seg.rstrip())
        if lead + trail < len(seg):
            spans.append((offsets[seg_start + lead], offsets[end + 1 - trail]))
        seg_start = end + 1
    return spans


def _sentence_token_ranges(tokens: list[Token], spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Map sentence byte spans to [start, end) token index ranges."""
    ranges: list[tuple[int, int]] = []
    t = 0
    for _, b_end in spans:
        start = t
        while t < len(tokens) and tokens[t].byte_start < b_end:
            t += 1
        if t > start:
            ranges.append((start, t))
    if t < len(tokens):  # defensive: spans and tokens both cover non-whitespace
        ranges.append((t, len(tokens)))
    return ranges


def chunk_document(paper: Paper, cfg: ChunkConfig) -> list[Chunk]:
    """Greedy sentence packing into chunks of at most cfg.target_tokens.

    Whole sentences accumulate while the total stays within the target. Each
    following chunk starts with the smallest whole-sentence suffix of the
    previous chunk holding at least cfg.overlap_tokens tokens (omitted when
    that suffix would repeat the whole chunk, and trimmed from the front when
    it would not leave room for the next sentence). A single sentence longer
    than the target is hard-split at token boundaries into target-sized
    pieces whose starts advance by target - overlap tokens.
    """
    if not paper.full_text:
        raise ValidationError(f"paper {paper.paper_id!r} has empty full_text")
    tokens = tokenize(paper.full_text)
    if not tokens:
        raise ValidationError(f"paper {paper.paper_id!r} has no tokens to chunk")
    sent_ranges = _sentence_token_ranges(tokens, split_sentences(paper.full_text))

    pieces: list[tuple[int, int]] = []
    cur: list[tuple[int, int]] = []
    cur_n = 0

    def emit_current() -> None:
        if cur:
            pieces.append((cur[0][0], cur[-1][1]))

    def overlap_suffix() -> list[tuple[int, int]]:
        total = 0
        suffix: list[tuple[int, int]] = []
        for rng in reversed(cur):
            suffix.insert(0, rng)
            total += rng[1] - rng[0]
            if total >= cfg.overlap_tokens:
                break
        if len(suffix) == len(cur):
            return []
        return suffix

    for rng in sent_ranges:
        n = rng[1] - rng[0]
        if n > cfg.target_tokens:
            emit_current()
            cur, cur_n = [], 0
            stride = cfg.target_tokens - cfg.overlap_tokens
            for s in range(rng[0], rng[1], stride):
                pieces.append((s, min(s + cfg.target_tokens, rng[1])))
            continue
        if cur_n + n <= cfg.target_tokens:
            cur.append(rng)
            cur_n += n
            continue
        pieces.append((cur[0][0], cur[-1][1]))
        suffix = overlap_suffix()
        while suffix and sum(e - s for s, e in suffix) + n > cfg.target_tokens:
            suffix = suffix[1:]
        cur = suffix + [rng]
        cur_n = sum(e - s for s, e in cur)
    emit_current()

    data = paper.full_text.encode("utf-8")
    chunks = []
    for seq, (start, end) in enumerate(pieces):
        text = data[tokens[start].byte_start : tokens[end - 1].byte_end].decode("utf-8")
        chunks.append(
            Chunk(
                chunk_id=f"{paper.paper_id}#{seq}",
                paper_id=paper.paper_id,
                bibref_key=paper.bibref_key,
                text=text,
                token_start=start,
                token_end=end,
            )
        )
    return chunks


_REQUIRED_TASK_KEYS = ("survey_title", "section_title", "papers")
_REQUIRED_PAPER_KEYS = ("paper_id", "bibref_key", "title", "abstract", "full_text")


def _parse_paper(raw: object, task_index: int, pos: int) -> Paper:
    if not isinstance(raw, dict):
        raise ParseError(f"task {task_index}: papers[{pos}] is not an object")
    missing = [k for k in _REQUIRED_PAPER_KEYS if k not in raw]
    if missing:
        raise ParseError(f"task {task_index}: papers[{pos}] missing keys {missing}")
    paper = Paper(
        paper_id=str(raw["paper_id"]),
        bibref_key=str(raw["bibref_key"]),
        title=str(raw["title"]),
        abstract=str(raw["abstract"]),
        full_text=str(raw["full_text"] or ""),
    )
    if not BIBREF_KEY_RE.match(paper.bibref_key):
        raise ValidationError(
            f"task {task_index}: paper {paper.paper_id!r} has invalid "
            f"bibref_key {paper.bibref_key!r}"
        )
    return paper


def read_task_file(path: str | Path) -> LoadedTasks:
    """Parse a line-delimited JSON task file into validated tasks.

    Papers without usable full text are excluded and reported per record;
    tasks left with no papers are reported as failed rather than raising, so
    one bad task does not abort a whole ingest.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read task file {path}: {exc}") from exc

    result = LoadedTasks()
    task_index = -1
    saw_record = False
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        saw_record = True
        task_index += 1
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path} line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ParseError(f"{path} line {lineno}: record is not an object")
        missing = [k for k in _REQUIRED_TASK_KEYS if k not in raw]
        if missing:
            raise ParseError(f"{path} line {lineno}: missing keys {missing}")
        if not isinstance(raw["papers"], list) or not raw["papers"]:
            raise ValidationError(f"task {task_index}: papers must be a non-empty list")

        papers = [_parse_paper(p, task_index, i) for i, p in enumerate(raw["papers"])]
        seen_keys: set[str] = set()
        seen_ids: set[str] = set()
        for paper in papers:
            if paper.bibref_key in seen_keys:
                raise ValidationError(
                    f"task {task_index}: duplicate bibref_key {paper.bibref_key!r}"
                )
            if paper.paper_id in seen_ids:
                raise ValidationError(
                    f"task {task_index}: duplicate paper_id {paper.paper_id!r}"
                )
            seen_keys.add(paper.bibref_key)
            seen_ids.add(paper.paper_id)

        usable = []
        for paper in papers:
            if paper.full_text.strip():
                usable.append(paper)
            else:
                record = ExcludedPaper(task_index, paper.paper_id, "empty full_text")
                result.excluded.append(record)
                logger.warning(
                    "task %d: excluding paper %s (%s)",
                    task_index,
                    paper.paper_id,
                    record.reason,
                )
        if not usable:
            result.failed.append(FailedTask(task_index, "no papers with full text"))
            continue

        ground_truth = raw.get("ground_truth_text")
        result.tasks.append(
            SurveyTask(
                survey_title=str(raw["survey_title"]),
                section_title=str(raw["section_title"]),
                ground_truth_text=str(ground_truth) if ground_truth else None,
                papers=tuple(usable),
            )
        )
    if not saw_record:
        raise ParseError(f"{path}: no task records found")
    return result


def load_survey_tasks(path: str | Path) -> list[SurveyTask]:
    """Strict loader: any task left without full-text papers is an error."""
    loaded = read_task_file(path)
    if loaded.failed:
        first = loaded.failed[0]
        raise ValidationError(f"task {first.task_index}: {first.reason}")
    return loaded.tasks
