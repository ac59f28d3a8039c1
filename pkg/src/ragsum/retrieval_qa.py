"""Two-stage retrieval (cosine top-n, MaxSim rerank top-m) and grounded answering.

Answer prompts carry every chunk prefixed with its bracketed bibref key, ask
the model to cite only those keys, and define a literal sentinel so that a
refusal ("the context is insufficient") is machine-detectable.
"""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .corpus import Chunk
from .errors import DimensionMismatch, EmptyTokenList, ValidationError
from .providers import ChatRequest, GenerationSettings, Message, TokenEmbeddings
from .question_gen import GeneratedQuestion
from .vector_index import SearchHit, VectorIndex

ANSWER_SENTINEL = "NO_ANSWER"

ANSWER_SYSTEM = (
    "You answer questions strictly from the supplied source excerpts and cite "
    "the bracketed source keys."
)

CITATION_RE = re.compile(r"\[(BIBREF\d+)\]")


@dataclass(frozen=True)
class RetrievalResult:
    question_id: str
    stage1: tuple[SearchHit, ...]
    stage2: tuple[SearchHit, ...]


@dataclass(frozen=True)
class Answer:
    question_id: str
    text: str
    cited_bibrefs: frozenset[str]
    abstained: bool
    used_chunk_ids: tuple[str, ...]


def extract_citations(text: str) -> set[str]:
    """Unique bibref keys cited as bracketed markers, brackets stripped."""
    return set(CITATION_RE.findall(text or ""))


def maxsim_score(q: TokenEmbeddings, d: TokenEmbeddings) -> float:
    """Sum over query tokens of the maximum dot product with any document token."""
    if len(q.tokens) == 0 or len(d.tokens) == 0:
        raise EmptyTokenList("maxsim_score needs non-empty token embeddings")
    if q.dim != d.dim:
        raise DimensionMismatch(f"query dim {q.dim} != document dim {d.dim}")
    sim = q.vectors @ d.vectors.T
    return float(sim.max(axis=1).sum())


def retrieve_stage1(
    question: GeneratedQuestion,
    index: VectorIndex,
    embedder,
    n: int = 100,
) -> list[SearchHit]:
    """Cosine top-n hits for the embedded question text."""
    if not index.frozen:
        raise ValidationError("stage-1 retrieval requires a frozen index")
    return index.search(embedder.embed_query(question.text), n)


def rerank(
    question: GeneratedQuestion,
    stage1: Sequence[SearchHit],
    chunk_texts: Mapping[str, str],
    embedder,
    m: int = 20,
    *,
    token_cache: dict[str, TokenEmbeddings] | None = None,
) -> list[SearchHit]:
    """Re-score stage-1 hits with MaxSim over token embeddings, keep the top m.

    `token_cache` (chunk_id -> TokenEmbeddings) is consulted and filled so a
    chunk's tokens are embedded once per task, not once per question.
    """
    if not stage1:
        raise ValidationError("rerank requires non-empty stage-1 hits")
    q_emb = embedder.embed_tokens(question.text)
    scored = []
    for hit in stage1:
        d_emb = token_cache.get(hit.chunk_id) if token_cache is not None else None
        if d_emb is None:
            d_emb = embedder.embed_tokens(chunk_texts[hit.chunk_id])
            if token_cache is not None:
                token_cache[hit.chunk_id] = d_emb
        scored.append(SearchHit(hit.chunk_id, maxsim_score(q_emb, d_emb)))
    scored.sort(key=lambda h: (-h.score, h.chunk_id))
    return scored[:m]


def build_answer_prompt(question: GeneratedQuestion, chunks: Sequence[Chunk]) -> ChatRequest:
    """Grounded-answer prompt: bibref-prefixed sources, citation rule, sentinel."""
    if not chunks:
        raise ValidationError("answer prompt requires at least one chunk")
    blocks = "\n\n".join(f"[{c.bibref_key}] {c.text}" for c in chunks)
    user = (
        f"Sources:\n\n{blocks}\n\n"
        f"Question: {question.text}\n\n"
        "Answer using only the sources above. Cite every claim with the bracketed "
        "keys exactly as given (e.g. [BIBREF14]) and do not invent other citation "
        f"keys. If the sources are insufficient to answer, reply with exactly "
        f"{ANSWER_SENTINEL} and nothing else."
    )
    return ChatRequest(
        model="",
        messages=(Message("system", ANSWER_SYSTEM), Message("user", user)),
    )


def generate_answer(
    question: GeneratedQuestion,
    stage2_chunks: Sequence[Chunk],
    chat,
    *,
    settings: GenerationSettings | None = None,
    counters=None,
) -> Answer:
    """Call the chat backend; detect abstention; strip out-of-set citations."""
    req = build_answer_prompt(question, stage2_chunks)
    if settings is not None:
        req = settings.apply(req)
    resp = chat.chat(req)
    used_ids = tuple(c.chunk_id for c in stage2_chunks)
    text = resp.text.strip()
    if text == ANSWER_SENTINEL:
        return Answer(question.question_id, "", frozenset(), True, used_ids)
    allowed = {c.bibref_key for c in stage2_chunks}
    found = extract_citations(text)
    for key in sorted(found - allowed):
        text = re.sub(rf"\s?\[{key}\]", "", text)
        if counters is not None:
            counters.log_stripped(question.question_id, key)
    return Answer(
        question_id=question.question_id,
        text=text.strip(),
        cited_bibrefs=frozenset(found & allowed),
        abstained=False,
        used_chunk_ids=used_ids,
    )
