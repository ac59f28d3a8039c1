"""Pipeline configuration: YAML loading, validation, and the output config hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .corpus import ChunkConfig
from .errors import InvalidConfig
from .providers import DEFAULT_TEMPERATURE, DEFAULT_TOP_P, ProviderConfig

PROVIDER_STAGES = ("question", "answer", "editor", "judge", "embeddings")


@dataclass(frozen=True)
class ProviderMap:
    """Backend configuration per pipeline stage; judge is optional."""

    question: ProviderConfig = ProviderConfig(endpoint="mock:101", model="mock-chat")
    answer: ProviderConfig = ProviderConfig(endpoint="mock:102", model="mock-chat")
    editor: ProviderConfig = ProviderConfig(endpoint="mock:103", model="mock-chat")
    judge: ProviderConfig | None = ProviderConfig(endpoint="mock:104", model="mock-chat")
    embeddings: ProviderConfig = ProviderConfig(endpoint="mock:7", model="mock-embed")


@dataclass(frozen=True)
class PipelineConfig:
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    k_questions: int = 5
    stage1_n: int = 100
    stage2_m: int = 20
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    checklist_size: int = 10
    concurrency: int = 4
    providers: ProviderMap = field(default_factory=ProviderMap)

    def __post_init__(self) -> None:
        for name in ("k_questions", "stage1_n", "stage2_m", "checklist_size", "concurrency"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")


_PROVIDER_KEYS = {
    "endpoint",
    "model",
    "credential_env",
    "timeout_s",
    "retries",
    "concurrency",
    "backoff_base_ms",
    "dim",
}


def _provider_from_dict(raw: dict, where: str) -> ProviderConfig:
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where}: provider entry must be a mapping")
    unknown = set(raw) - _PROVIDER_KEYS
    if unknown:
        raise InvalidConfig(f"{where}: unknown provider keys {sorted(unknown)}")
    if "endpoint" not in raw:
        raise InvalidConfig(f"{where}: provider entry needs an endpoint")
    return ProviderConfig(**raw)


_TOP_KEYS = {
    "chunk",
    "k_questions",
    "stage1_n",
    "stage2_m",
    "generation",
    "checklist_size",
    "concurrency",
    "providers",
}


def load_config(path: str | Path) -> PipelineConfig:
    """Read the documented YAML config file into a validated PipelineConfig."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidConfig(f"config {path} must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise InvalidConfig(f"config {path}: unknown keys {sorted(unknown)}")

    kwargs: dict = {}
    if "chunk" in raw:
        chunk = raw["chunk"] or {}
        unknown = set(chunk) - {"target_tokens", "overlap_tokens"}
        if unknown:
            raise InvalidConfig(f"config {path}: unknown chunk keys {sorted(unknown)}")
        kwargs["chunk"] = ChunkConfig(**chunk)
    for name in ("k_questions", "stage1_n", "stage2_m", "checklist_size", "concurrency"):
        if name in raw:
            kwargs[name] = int(raw[name])
    if "generation" in raw:
        gen = raw["generation"] or {}
        unknown = set(gen) - {"temperature", "top_p"}
        if unknown:
            raise InvalidConfig(f"config {path}: unknown generation keys {sorted(unknown)}")
        if "temperature" in gen:
            kwargs["temperature"] = float(gen["temperature"])
        if "top_p" in gen:
            kwargs["top_p"] = float(gen["top_p"])
    if "providers" in raw:
        providers = raw["providers"] or {}
        unknown = set(providers) - set(PROVIDER_STAGES)
        if unknown:
            raise InvalidConfig(f"config {path}: unknown provider stages {sorted(unknown)}")
        pm_kwargs: dict = {}
        for stage in PROVIDER_STAGES:
            if stage in providers:
                entry = providers[stage]
                if stage == "judge" and entry is None:
                    pm_kwargs["judge"] = None
                else:
                    pm_kwargs[stage] = _provider_from_dict(entry, f"providers.{stage}")
        kwargs["providers"] = ProviderMap(**pm_kwargs)
    return PipelineConfig(**kwargs)


def _hash_provider(cfg: ProviderConfig | None) -> dict | None:
    # Only fields that change what a backend returns; transport tuning
    # (timeouts, retries, concurrency) deliberately stays out of the hash.
    if cfg is None:
        return None
    return {"endpoint": cfg.endpoint, "model": cfg.model, "dim": cfg.dim}


def config_hash(cfg: PipelineConfig) -> str:
    """Stable hash over every configuration field that affects run outputs."""
    material = {
        "chunk": {
            "target_tokens": cfg.chunk.target_tokens,
            "overlap_tokens": cfg.chunk.overlap_tokens,
        },
        "k_questions": cfg.k_questions,
        "stage1_n": cfg.stage1_n,
        "stage2_m": cfg.stage2_m,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "checklist_size": cfg.checklist_size,
        "providers": {
            stage: _hash_provider(getattr(cfg.providers, stage))
            for stage in PROVIDER_STAGES
        },
    }
    canonical = json.dumps(material, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def with_seeded_mocks(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Convenience for tests: all-mock providers derived from one seed."""
    return replace(
        cfg,
        providers=ProviderMap(
            question=ProviderConfig(endpoint=f"mock:{seed + 1}", model="mock-chat"),
            answer=ProviderConfig(endpoint=f"mock:{seed + 2}", model="mock-chat"),
            editor=ProviderConfig(endpoint=f"mock:{seed + 3}", model="mock-chat"),
            judge=ProviderConfig(endpoint=f"mock:{seed + 4}", model="mock-chat"),
            embeddings=ProviderConfig(endpoint=f"mock:{seed}", model="mock-embed"),
        ),
    )
