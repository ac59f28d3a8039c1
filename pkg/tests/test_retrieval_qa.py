import random

import numpy as np
import pytest

from ragsum.corpus import Chunk
from ragsum.errors import DimensionMismatch, EmptyTokenList, ValidationError
from ragsum.manifest import RunCounters
from ragsum.providers import (
    MockChatProvider,
    MockEmbeddingProvider,
    ProviderConfig,
    TokenEmbeddings,
    normalized,
)
from ragsum.question_gen import GeneratedQuestion
from ragsum.retrieval_qa import (
    ANSWER_SENTINEL,
    build_answer_prompt,
    extract_citations,
    generate_answer,
    maxsim_score,
    rerank,
    retrieve_stage1,
)
from ragsum.vector_index import IndexEntry, SearchHit, VectorIndex


def _tok(*rows) -> TokenEmbeddings:
    matrix = np.asarray(rows, dtype=np.float64)
    return TokenEmbeddings(tokens=tuple(f"t{i}" for i in range(len(rows))), vectors=matrix)


def _question(text="What is studied?", qid="p1/q1") -> GeneratedQuestion:
    return GeneratedQuestion(qid, "p1", 1, text)


def _chunk(chunk_id="p1#0", bibref="BIBREF1", text="Some chunk text.") -> Chunk:
    return Chunk(chunk_id, chunk_id.split("#")[0], bibref, text, 0, len(text.split()))


# ---------------------------------------------------------------------------
# maxsim_score
# ---------------------------------------------------------------------------


def test_maxsim_identical_single_token():
    assert maxsim_score(_tok([1.0, 0.0]), _tok([1.0, 0.0])) == pytest.approx(1.0)


def test_maxsim_hand_case():
    q = _tok([1.0, 0.0], [0.0, 1.0])
    d = _tok([0.6, 0.8], [1.0, 0.0])
    assert maxsim_score(q, d) == pytest.approx(1.8)


def test_maxsim_containment_upper_bound():
    rng = np.random.default_rng(5)
    q_rows = [normalized(rng.standard_normal(6)) for _ in range(4)]
    d_rows = q_rows + [normalized(rng.standard_normal(6)) for _ in range(3)]
    score = maxsim_score(_tok(*q_rows), _tok(*d_rows))
    assert score == pytest.approx(4.0, abs=1e-9)


def test_maxsim_bounded_by_query_token_count():
    rng = np.random.default_rng(6)
    for _ in range(20):
        q = _tok(*[normalized(rng.standard_normal(5)) for _ in range(3)])
        d = _tok(*[normalized(rng.standard_normal(5)) for _ in range(7)])
        assert maxsim_score(q, d) <= 3.0 + 1e-9


def test_maxsim_invariant_under_document_permutation():
    rng = np.random.default_rng(7)
    q = _tok(*[normalized(rng.standard_normal(5)) for _ in range(3)])
    rows = [normalized(rng.standard_normal(5)) for _ in range(6)]
    base = maxsim_score(q, _tok(*rows))
    for seed in range(4):
        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        assert maxsim_score(q, _tok(*shuffled)) == pytest.approx(base, abs=1e-12)


def test_maxsim_empty_tokens():
    q = _tok([1.0, 0.0])
    empty = TokenEmbeddings(tokens=(), vectors=np.empty((0, 2)))
    with pytest.raises(EmptyTokenList):
        maxsim_score(q, empty)
    with pytest.raises(EmptyTokenList):
        maxsim_score(empty, q)


def test_maxsim_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        maxsim_score(_tok([1.0, 0.0]), _tok([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# retrieve_stage1
# ---------------------------------------------------------------------------


def _index_for(texts: dict[str, str], embedder) -> VectorIndex:
    index = VectorIndex()
    index.add([IndexEntry(cid, embedder.embed_passage(text)) for cid, text in texts.items()])
    index.freeze()
    return index


def test_stage1_capped_by_index_size(mock_embedder):
    texts = {f"p1#{i}": f"chunk number {i}" for i in range(5)}
    index = _index_for(texts, mock_embedder)
    hits = retrieve_stage1(_question(), index, mock_embedder, n=100)
    assert len(hits) == 5


def test_stage1_self_similarity_ranks_first(mock_embedder):
    question = _question("an exact match probe?")
    texts = {"p1#0": "unrelated text", "p1#1": question.text, "p1#2": "other words"}
    index = _index_for(texts, mock_embedder)
    hits = retrieve_stage1(_question(question.text), index, mock_embedder, n=3)
    assert hits[0].chunk_id == "p1#1"
    assert hits[0].score == pytest.approx(1.0, abs=1e-6)


def test_stage1_requires_frozen_index(mock_embedder):
    index = VectorIndex()
    index.add([IndexEntry("c", mock_embedder.embed_passage("text"))])
    with pytest.raises(ValidationError):
        retrieve_stage1(_question(), index, mock_embedder)


def test_stage1_matches_brute_force(mock_embedder):
    texts = {f"p1#{i}": f"seeded chunk {i} about topic {i % 7}" for i in range(50)}
    index = _index_for(texts, mock_embedder)
    question = _question("seeded query about topics?")
    hits = retrieve_stage1(question, index, mock_embedder, n=10)
    qv = mock_embedder.embed_query(question.text).values
    scored = sorted(
        ((cid, sum(a * b for a, b in zip(mock_embedder.embed_passage(t).values, qv)))
         for cid, t in texts.items()),
        key=lambda pair: (-pair[1], pair[0]),
    )[:10]
    assert [h.chunk_id for h in hits] == [cid for cid, _ in scored]
    for hit, (_, score) in zip(hits, scored):
        assert hit.score == pytest.approx(score, abs=1e-9)


# ---------------------------------------------------------------------------
# rerank
# ---------------------------------------------------------------------------


def _double_loop_rerank(question_text, hits, texts, embedder, m):
    """Independent oracle: explicit double loop over query and chunk tokens."""
    q = embedder.embed_tokens(question_text)
    scored = []
    for hit in hits:
        d = embedder.embed_tokens(texts[hit.chunk_id])
        total = 0.0
        for qv in q.vectors:
            best = max(float(qv @ dv) for dv in d.vectors)
            total += best
        scored.append((hit.chunk_id, total))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:m]


def test_rerank_matches_double_loop_oracle(mock_embedder):
    texts = {f"p1#{i:02d}": f"chunk {i} words about theme {i % 5} and more" for i in range(30)}
    hits = [SearchHit(cid, 0.0) for cid in texts]
    question = _question("which chunks describe theme two?")
    got = rerank(question, hits, texts, mock_embedder, m=20)
    expected = _double_loop_rerank(question.text, hits, texts, mock_embedder, 20)
    assert [h.chunk_id for h in got] == [cid for cid, _ in expected]
    for hit, (_, score) in zip(got, expected):
        assert hit.score == pytest.approx(score, abs=1e-9)


def test_rerank_without_truncation_is_permutation(mock_embedder):
    texts = {f"p1#{i}": f"text number {i}" for i in range(8)}
    hits = [SearchHit(cid, 0.5) for cid in texts]
    got = rerank(_question(), hits, texts, mock_embedder, m=50)
    assert sorted(h.chunk_id for h in got) == sorted(texts)


def test_rerank_identical_chunks_tie_break_on_id(mock_embedder):
    texts = {cid: "identical chunk text" for cid in ("p1#2", "p1#0", "p1#1")}
    hits = [SearchHit(cid, 0.0) for cid in ("p1#2", "p1#0", "p1#1")]
    got = rerank(_question(), hits, texts, mock_embedder, m=3)
    assert [h.chunk_id for h in got] == ["p1#0", "p1#1", "p1#2"]
    assert got[0].score == got[1].score == got[2].score


def test_rerank_fills_token_cache(mock_embedder):
    texts = {f"p1#{i}": f"cached text {i}" for i in range(4)}
    hits = [SearchHit(cid, 0.0) for cid in texts]
    cache: dict = {}
    rerank(_question(), hits, texts, mock_embedder, m=4, token_cache=cache)
    assert set(cache) == set(texts)
    before = mock_embedder.stats.snapshot()["calls"]
    rerank(_question("another question?"), hits, texts, mock_embedder, m=4, token_cache=cache)
    # only the new question was embedded the second time
    assert mock_embedder.stats.snapshot()["calls"] == before + 1


def test_rerank_requires_stage1():
    with pytest.raises(ValidationError):
        rerank(_question(), [], {}, MockEmbeddingProvider(), m=5)


class _CollapsingEmbedder:
    """Token embeddings collapse to the chunk's single passage vector."""

    def __init__(self):
        self._inner = MockEmbeddingProvider(ProviderConfig(endpoint="mock:3", dim=8))

    def embed_passage(self, text):
        return self._inner.embed_passage(text)

    embed_query = embed_passage

    def embed_tokens(self, text):
        vec = self._inner.embed_passage(text).values
        return TokenEmbeddings(tokens=(text,), vectors=vec.reshape(1, -1))


def test_rerank_with_collapsing_mock_resorts_stage1():
    embedder = _CollapsingEmbedder()
    texts = {f"p1#{i}": f"chunk body {i}" for i in range(10)}
    index = _index_for(texts, embedder)
    question = _question("collapse probe?")
    stage1 = retrieve_stage1(question, index, embedder, n=10)
    stage2 = rerank(question, stage1, texts, embedder, m=10)
    assert [h.chunk_id for h in stage2] == [h.chunk_id for h in stage1]
    for s1, s2 in zip(stage1, stage2):
        assert s2.score == pytest.approx(s1.score, abs=1e-9)


# ---------------------------------------------------------------------------
# build_answer_prompt
# ---------------------------------------------------------------------------


def test_answer_prompt_has_one_block_per_chunk():
    chunks = [
        _chunk("p1#0", "BIBREF1", "First chunk."),
        _chunk("p1#1", "BIBREF1", "Second chunk."),
        _chunk("p2#0", "BIBREF2", "Third chunk."),
    ]
    user = build_answer_prompt(_question(), chunks).messages[-1].content
    assert user.count("[BIBREF1] ") == 2
    assert user.count("[BIBREF2] ") == 1
    assert "Question: What is studied?" in user


def test_answer_prompt_contains_sentinel_instruction():
    for chunks in ([_chunk()], [_chunk(), _chunk("p2#0", "BIBREF2")]):
        user = build_answer_prompt(_question(), chunks).messages[-1].content
        assert f"reply with exactly {ANSWER_SENTINEL} and nothing else" in user


def test_answer_prompt_passes_embedded_markers_through():
    chunk = _chunk("p1#0", "BIBREF1", "It builds on [BIBREF9] directly.")
    user = build_answer_prompt(_question(), [chunk]).messages[-1].content
    assert "[BIBREF1] It builds on [BIBREF9] directly." in user


def test_answer_prompt_requires_chunks():
    with pytest.raises(ValidationError):
        build_answer_prompt(_question(), [])


# ---------------------------------------------------------------------------
# generate_answer
# ---------------------------------------------------------------------------


def test_generate_answer_sentinel_path():
    chat = MockChatProvider(script=["NO_ANSWER"])
    answer = generate_answer(_question(), [_chunk()], chat)
    assert answer.abstained
    assert answer.text == ""
    assert answer.cited_bibrefs == frozenset()
    assert answer.used_chunk_ids == ("p1#0",)


def test_generate_answer_sentinel_with_whitespace():
    chat = MockChatProvider(script=["  NO_ANSWER \n"])
    assert generate_answer(_question(), [_chunk()], chat).abstained


def test_generate_answer_extracts_allowed_citations():
    chat = MockChatProvider(script=["X is true [BIBREF3]."])
    answer = generate_answer(_question(), [_chunk(bibref="BIBREF3")], chat)
    assert not answer.abstained
    assert answer.cited_bibrefs == frozenset({"BIBREF3"})
    assert answer.text == "X is true [BIBREF3]."


def test_generate_answer_strips_invalid_citation_and_logs():
    counters = RunCounters()
    chat = MockChatProvider(script=["Claim [BIBREF3]. Bogus claim [BIBREF99]."])
    answer = generate_answer(
        _question(), [_chunk(bibref="BIBREF3")], chat, counters=counters
    )
    assert answer.cited_bibrefs == frozenset({"BIBREF3"})
    assert "[BIBREF99]" not in answer.text
    assert answer.text == "Claim [BIBREF3]. Bogus claim."
    assert counters.stripped() == [{"where": "p1/q1", "key": "BIBREF99"}]


def test_generate_answer_citation_subset_invariant():
    chunks = [_chunk("p1#0", "BIBREF1"), _chunk("p2#0", "BIBREF2")]
    chat = MockChatProvider()
    answer = generate_answer(_question(), chunks, chat)
    assert answer.cited_bibrefs <= {"BIBREF1", "BIBREF2"}
    assert not answer.abstained


# ---------------------------------------------------------------------------
# extract_citations
# ---------------------------------------------------------------------------


def test_extract_citations_dedupes():
    text = "A [BIBREF14], B [BIBREF16] and [BIBREF14]"
    assert extract_citations(text) == {"BIBREF14", "BIBREF16"}


def test_extract_citations_empty():
    assert extract_citations("no citations here") == set()


def test_extract_citations_requires_digits():
    assert extract_citations("[BIBREF]") == set()
