"""Chat and embedding backends: OpenAI-style HTTP clients plus seeded offline mocks.

Mock providers are pure functions of (seed, input) and are selected with the
endpoint scheme ``mock:<seed>``. Every embedding returned by any provider is
normalized client-side to unit Euclidean norm, so cosine similarity reduces
to a dot product downstream.
"""

from __future__ import annotations

import hashlib
import os
import random
import re
import threading
import time
from dataclasses import dataclass, replace

import httpx
import numpy as np

from . import corpus
from .errors import (
    DimensionMismatch,
    EmptyInput,
    ProviderError,
    ProviderTimeout,
    ValidationError,
)

ROLES = ("system", "user", "assistant")

DEFAULT_TEMPERATURE = 0.3
DEFAULT_TOP_P = 0.95


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValidationError("chat request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValidationError(f"temperature out of range: {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValidationError(f"top_p out of range: {self.top_p}")


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    completion: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str  # stop | length | error
    token_usage: TokenUsage = TokenUsage()


@dataclass(frozen=True)
class GenerationSettings:
    """Per-stage overrides applied to prompt-builder requests."""

    model: str = ""
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int | None = None

    def apply(self, req: ChatRequest) -> ChatRequest:
        return replace(
            req,
            model=self.model or req.model,
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens if self.max_tokens is not None else req.max_tokens,
        )


class EmbeddingVector:
    """Unit-norm dense vector."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"EmbeddingVector(dim={self.dim})"


@dataclass(frozen=True)
class TokenEmbeddings:
    """Per-token unit-norm vectors; row i of `vectors` embeds tokens[i]."""

    tokens: tuple[str, ...]
    vectors: np.ndarray  # shape (len(tokens), dim)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def normalized(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if not np.isfinite(norm) or norm == 0.0:
        raise ProviderError("embedding has zero or non-finite norm")
    return arr / norm


@dataclass(frozen=True)
class ProviderConfig:
    """Connection settings for one backend.

    `credential_env` names the environment variable holding the API key;
    the key itself is never stored in configuration files.
    """

    endpoint: str
    model: str = ""
    credential_env: str | None = None
    timeout_s: float = 30.0
    retries: int = 3
    concurrency: int = 4
    backoff_base_ms: float = 500.0
    dim: int = 32  # mock embedding dimension; HTTP providers learn dim from responses

    def mock_seed(self) -> int | None:
        if self.endpoint.startswith("mock:"):
            try:
                return int(self.endpoint.split(":", 1)[1])
            except ValueError as exc:
                raise ValidationError(f"bad mock endpoint {self.endpoint!r}") from exc
        return None


class ProviderStats:
    """Thread-safe call and retry counters, surfaced in the run manifest."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.retries = 0

    def record_call(self) -> None:
        with self._lock:
            self.calls += 1

    def record_retry(self) -> None:
        with self._lock:
            self.retries += 1

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {"calls": self.calls, "retries": self.retries}


class _Transient(Exception):
    """Internal marker for a retryable transport failure."""

    def __init__(self, message: str, status: int | None = None, body: str = "", timeout: bool = False):
        super().__init__(message)
        self.status = status
        self.body = body
        self.timeout = timeout


class _RetryingProvider:
    def __init__(self, config: ProviderConfig):
        self.config = config
        self.stats = ProviderStats()
        self._jitter = random.Random()

    def _backoff_s(self, attempt: int) -> float:
        base = self.config.backoff_base_ms / 1000.0 * (2 ** (attempt - 1))
        return base + self._jitter.uniform(0.0, base / 2.0)

    def _with_retries(self, send):
        self.stats.record_call()
        last: _Transient | None = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                self.stats.record_retry()
                delay = self._backoff_s(attempt)
                if delay:
                    time.sleep(delay)
            try:
                return send()
            except _Transient as exc:
                last = exc
        assert last is not None
        attempts = self.config.retries + 1
        if last.timeout:
            raise ProviderTimeout(
                f"request timed out after {attempts} attempt(s)", status=last.status, body=last.body
            )
        raise ProviderError(
            f"gave up after {attempts} attempt(s): {last}", status=last.status, body=last.body
        )


def _require_text(text: str) -> None:
    if not text or not text.strip():
        raise EmptyInput("cannot embed empty text")


# ---------------------------------------------------------------------------
# Mock providers
# ---------------------------------------------------------------------------

_QGEN_RE = re.compile(r"exactly (\d+) question")
_TITLE_RE = re.compile(r"^Title: (.+)$", re.MULTILINE)
_QUESTION_LINE_RE = re.compile(r"^Question: (.+)$", re.MULTILINE)
_MARKER_RE = re.compile(r"\[(BIBREF\d+)\]")
_CHECKLIST_GEN_RE = re.compile(r"exactly (\d+) yes/no questions")
_CHECK_ITEM_RE = re.compile(r"^\d+\. (.+)$", re.MULTILINE)

_QUESTION_ASPECTS = (
    "its central methodology",
    "the evaluation evidence it reports",
    "its main contributions",
    "the limitations it acknowledges",
    "the directions it proposes for further work",
    "the data it builds on",
    "how it compares against prior approaches",
)


def _digest(*parts: object) -> int:
    material = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:8], "big")


class MockChatProvider(_RetryingProvider):
    """Offline chat double.

    With a `script`, each call pops the next entry: a string becomes a
    normal response, an int becomes an HTTP-style failure (429/5xx retryable,
    other codes fatal), an exception instance is raised as-is. Without a
    script, the provider synthesizes deterministic, stage-appropriate text by
    recognizing the structural markers of this package's prompt templates.
    """

    def __init__(
        self,
        config: ProviderConfig | None = None,
        *,
        script: list[object] | None = None,
        abstain_questions: frozenset[str] | set[str] = frozenset(),
    ):
        super().__init__(config or ProviderConfig(endpoint="mock:0", backoff_base_ms=0.0))
        seed = self.config.mock_seed()
        self._seed = 0 if seed is None else seed
        self._script = list(script) if script is not None else None
        self._script_lock = threading.Lock()
        self._abstain = frozenset(abstain_questions)

    def chat(self, req: ChatRequest) -> ChatResponse:
        def send() -> ChatResponse:
            if self._script is not None:
                return self._play_script()
            return self._synthesize(req)

        return self._with_retries(send)

    def _play_script(self) -> ChatResponse:
        with self._script_lock:
            if not self._script:
                raise ProviderError("mock script exhausted")
            entry = self._script.pop(0)
        if isinstance(entry, BaseException):
            raise entry
        if isinstance(entry, int):
            if entry == 429 or entry >= 500:
                raise _Transient(f"scripted status {entry}", status=entry, body="scripted failure")
            raise ProviderError(f"scripted status {entry}", status=entry, body="scripted failure")
        text = str(entry)
        return ChatResponse(text, "stop", TokenUsage(prompt=0, completion=len(text.split())))

    def _synthesize(self, req: ChatRequest) -> ChatResponse:
        content = "\n\n".join(m.content for m in req.messages)
        text = (
            self._checklist_answers(content)
            or self._checklist(content)
            or self._judge_score(content)
            or self._editor_summary(content)
            or self._grounded_answer(content)
            or self._question_list(content)
            or "OK"
        )
        return ChatResponse(text, "stop", TokenUsage(prompt=0, completion=len(text.split())))

    def _checklist_answers(self, content: str) -> str | None:
        if "Answer each checklist item" not in content:
            return None
        items = _CHECK_ITEM_RE.findall(content.split("Summary:", 1)[0])
        lines = []
        for i, item in enumerate(items, 1):
            verdict = "yes" if _digest(self._seed, "check", item) % 10 < 8 else "no"
            lines.append(f"{i}. {verdict}")
        return "\n".join(lines)

    def _checklist(self, content: str) -> str | None:
        m = _CHECKLIST_GEN_RE.search(content)
        if not m:
            return None
        n = int(m.group(1))
        return "\n".join(
            f"{i}. Does the summary cover reference point {i}?" for i in range(1, n + 1)
        )

    def _judge_score(self, content: str) -> str | None:
        if "single integer from 1 to 5" not in content:
            return None
        score = 3 + _digest(self._seed, "judge", content) % 3
        return f"The summary covers most central points with minor omissions.\n{score}"

    def _editor_summary(self, content: str) -> str | None:
        if "### QUESTIONS AND ANSWERS ###" not in content:
            return None
        # Cite only what the answers cite, not the template's own examples.
        qa_block = content.split("### QUESTIONS AND ANSWERS ###", 1)[1]
        qa_block = qa_block.split("### INSTRUCTIONS ###", 1)[0]
        keys = sorted(set(_MARKER_RE.findall(qa_block)))
        cited = " ".join(f"[{k}]" for k in keys)
        return (
            "The collected answers trace a consistent line of work across the "
            f"discussed sources, whose findings reinforce one another {cited}. "
            "Taken together they outline the methods examined, the evidence "
            "each source contributes, and the open issues that remain."
        ).strip()

    def _grounded_answer(self, content: str) -> str | None:
        if "NO_ANSWER" not in content:
            return None
        qm = _QUESTION_LINE_RE.search(content)
        question = qm.group(1) if qm else ""
        if question in self._abstain:
            return "NO_ANSWER"
        sources = content.split("\nQuestion:", 1)[0]
        keys = sorted(set(_MARKER_RE.findall(sources)))
        if not keys:
            return "NO_ANSWER"
        start = _digest(self._seed, "answer", question) % len(keys)
        first = keys[start]
        second = keys[(start + 1) % len(keys)]
        text = f"The sources describe this point directly [{first}]."
        if second != first:
            text += f" Complementary evidence appears in the remaining material [{second}]."
        return text

    def _question_list(self, content: str) -> str | None:
        m = _QGEN_RE.search(content)
        tm = _TITLE_RE.search(content)
        if not m or not tm:
            return None
        k = int(m.group(1))
        title = tm.group(1).strip()
        lines = []
        for i in range(1, k + 1):
            aspect = _QUESTION_ASPECTS[(i - 1) % len(_QUESTION_ASPECTS)]
            lines.append(f'{i}. What does "{title}" report about {aspect}?')
        return "\n".join(lines)


class MockEmbeddingProvider(_RetryingProvider):
    """Seeded hash-based embeddings: pure function of (seed, input)."""

    def __init__(self, config: ProviderConfig | None = None):
        super().__init__(config or ProviderConfig(endpoint="mock:0", backoff_base_ms=0.0))
        seed = self.config.mock_seed()
        self._seed = 0 if seed is None else seed

    @property
    def dim(self) -> int:
        return self.config.dim

    def _hash_vector(self, *parts: object) -> np.ndarray:
        digest = hashlib.sha256(
            "\x1f".join([str(self._seed), *map(str, parts)]).encode("utf-8")
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
        return normalized(rng.standard_normal(self.config.dim))

    def embed_passage(self, text: str) -> EmbeddingVector:
        _require_text(text)
        self.stats.record_call()
        return EmbeddingVector(self._hash_vector("text", text))

    def embed_query(self, text: str) -> EmbeddingVector:
        # Queries and passages share one embedding space in the mock.
        return self.embed_passage(text)

    def embed_tokens(self, text: str) -> TokenEmbeddings:
        _require_text(text)
        self.stats.record_call()
        tokens = tuple(t.text for t in corpus.tokenize(text))
        vectors = np.vstack(
            [self._hash_vector("token", tok, pos) for pos, tok in enumerate(tokens)]
        )
        return TokenEmbeddings(tokens=tokens, vectors=vectors)


# ---------------------------------------------------------------------------
# HTTP providers (OpenAI-compatible wire shapes)
# ---------------------------------------------------------------------------


class _HttpProvider(_RetryingProvider):
    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        super().__init__(config)
        self._client = httpx.Client(
            base_url=config.endpoint, timeout=config.timeout_s, transport=transport
        )

    def _headers(self) -> dict[str, str]:
        if not self.config.credential_env:
            return {}
        key = os.environ.get(self.config.credential_env, "")
        if not key:
            raise ProviderError(
                f"credential environment variable {self.config.credential_env!r} is not set"
            )
        return {"Authorization": f"Bearer {key}"}

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload, headers=self._headers())
        except httpx.TimeoutException as exc:
            raise _Transient(f"timeout: {exc}", timeout=True) from exc
        except httpx.TransportError as exc:
            raise _Transient(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(
                f"status {resp.status_code}", status=resp.status_code, body=resp.text[:2000]
            )
        if resp.status_code >= 400:
            raise ProviderError(
                f"request rejected with status {resp.status_code}",
                status=resp.status_code,
                body=resp.text[:2000],
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise ProviderError(f"non-JSON response body: {exc}", status=resp.status_code) from exc

    def close(self) -> None:
        self._client.close()


_FINISH_REASONS = {"stop": "stop", "length": "length"}


class HttpChatProvider(_HttpProvider):
    """Chat-completions client over the de-facto HTTP+JSON shape."""

    def chat(self, req: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": req.model or self.config.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "top_p": req.top_p,
        }
        if req.max_tokens is not None:
            payload["max_tokens"] = req.max_tokens

        def send() -> ChatResponse:
            data = self._post("/chat/completions", payload)
            try:
                choice = data["choices"][0]
                text = choice["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed chat response: {exc}", body=str(data)[:2000]) from exc
            if text is None:
                raise ProviderError("chat response carried no content", body=str(data)[:2000])
            usage = data.get("usage") or {}
            return ChatResponse(
                text=str(text),
                finish_reason=_FINISH_REASONS.get(choice.get("finish_reason"), "stop"),
                token_usage=TokenUsage(
                    prompt=int(usage.get("prompt_tokens", 0)),
                    completion=int(usage.get("completion_tokens", 0)),
                ),
            )

        return self._with_retries(send)


class HttpEmbeddingProvider(_HttpProvider):
    """Embeddings client; token-level vectors use the /token-embeddings extension."""

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        super().__init__(config, transport)
        self._dim: int | None = None
        self._dim_lock = threading.Lock()

    def _check_dim(self, vec: np.ndarray) -> None:
        with self._dim_lock:
            if self._dim is None:
                self._dim = int(vec.shape[-1])
            elif int(vec.shape[-1]) != self._dim:
                raise DimensionMismatch(
                    f"provider changed dimension mid-run: {vec.shape[-1]} != {self._dim}"
                )

    def _embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        payload = {"model": self.config.model, "input": [text]}

        def send() -> EmbeddingVector:
            data = self._post("/embeddings", payload)
            try:
                values = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ProviderError(f"malformed embedding response: {exc}") from exc
            vec = normalized(values)
            self._check_dim(vec)
            return EmbeddingVector(vec)

        return self._with_retries(send)

    def embed_passage(self, text: str) -> EmbeddingVector:
        return self._embed(text)

    def embed_query(self, text: str) -> EmbeddingVector:
        return self._embed(text)

    def embed_tokens(self, text: str) -> TokenEmbeddings:
        _require_text(text)
        payload = {"model": self.config.model, "input": text}

        def send() -> TokenEmbeddings:
            data = self._post("/token-embeddings", payload)
            try:
                tokens = tuple(str(t) for t in data["tokens"])
                matrix = np.asarray(data["vectors"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise ProviderError(f"malformed token-embedding response: {exc}") from exc
            if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
                raise ProviderError("token/vector count mismatch in response")
            rows = np.vstack([normalized(row) for row in matrix])
            self._check_dim(rows)
            return TokenEmbeddings(tokens=tokens, vectors=rows)

        return self._with_retries(send)


def make_chat_provider(config: ProviderConfig) -> MockChatProvider | HttpChatProvider:
    if config.mock_seed() is not None:
        return MockChatProvider(config)
    return HttpChatProvider(config)


def make_embedding_provider(config: ProviderConfig) -> MockEmbeddingProvider | HttpEmbeddingProvider:
    if config.mock_seed() is not None:
        return MockEmbeddingProvider(config)
    return HttpEmbeddingProvider(config)
