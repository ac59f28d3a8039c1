"""Question generation: k broad retrieval queries per paper from title and abstract."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import Paper
from .errors import CountMismatch, EmptyOutput, MissingField, ValidationError
from .providers import ChatRequest, GenerationSettings, Message

QUESTION_SYSTEM = (
    "You write broad, semantically rich questions that capture a scientific "
    "paper's main themes and contributions."
)

_NUMBER_PREFIX_RE = re.compile(r"^\s*(?:\d+[.)]\s*|[-•*]\s+)")


@dataclass(frozen=True)
class GeneratedQuestion:
    question_id: str  # "<paper_id>/q<index>"
    paper_id: str
    index: int  # 1-based
    text: str


def build_question_prompt(paper: Paper, k: int) -> ChatRequest:
    """Deterministic prompt asking for exactly k questions as a numbered list."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not paper.title.strip():
        raise MissingField(f"paper {paper.paper_id!r} has no title")
    if not paper.abstract.strip():
        raise MissingField(f"paper {paper.paper_id!r} has no abstract")
    noun = "question" if k == 1 else "questions"
    user = (
        f"Title: {paper.title}\n"
        f"Abstract: {paper.abstract}\n\n"
        f"Write exactly {k} {noun}, broad and semantically rich, covering the core "
        "themes and contributions of this paper. Output a numbered list with one "
        "question per line and no preamble."
    )
    return ChatRequest(
        model="",
        messages=(Message("system", QUESTION_SYSTEM), Message("user", user)),
    )


def parse_questions(raw: str, k: int) -> list[str]:
    """Strip numbering and bullets from a model reply; require exactly k lines."""
    if not raw or not raw.strip():
        raise EmptyOutput("model returned no text")
    questions = []
    for line in raw.splitlines():
        cleaned = _NUMBER_PREFIX_RE.sub("", line.strip()).strip()
        if cleaned:
            questions.append(cleaned)
    if not questions:
        raise EmptyOutput("model returned no question lines")
    if len(questions) != k:
        raise CountMismatch(len(questions), k)
    return questions


def _normalize_question(text: str) -> str:
    text = text.strip()
    return text if text.endswith("?") else text + "?"


def generate_questions(
    paper: Paper,
    k: int,
    chat,
    *,
    settings: GenerationSettings | None = None,
    counters=None,
) -> list[GeneratedQuestion]:
    """Ask the chat backend for k questions, retrying once on malformed output."""
    req = build_question_prompt(paper, k)
    if settings is not None:
        req = settings.apply(req)
    resp = chat.chat(req)
    try:
        raw_questions = parse_questions(resp.text, k)
    except (CountMismatch, EmptyOutput):
        noun = "question" if k == 1 else "questions"
        corrective = Message(
            "user",
            f"Your previous reply did not contain exactly {k} {noun}. Reply again "
            f"with exactly {k} {noun}, one per line, numbered, and nothing else.",
        )
        retry_req = ChatRequest(
            model=req.model,
            messages=req.messages + (Message("assistant", resp.text or ""), corrective),
            temperature=req.temperature,
            top_p=req.top_p,
            max_tokens=req.max_tokens,
        )
        if counters is not None:
            counters.bump("question_parse_retries")
        resp = chat.chat(retry_req)
        raw_questions = parse_questions(resp.text, k)
    return [
        GeneratedQuestion(
            question_id=f"{paper.paper_id}/q{i}",
            paper_id=paper.paper_id,
            index=i,
            text=_normalize_question(q),
        )
        for i, q in enumerate(raw_questions, 1)
    ]
