"""Exact in-process dense index with cosine top-k search.

The corpus behind one survey task is small (hundreds of chunks), so a flat
scan is used instead of an approximate structure: results are exact, which
lets tests pin them against a brute-force oracle. Vectors are unit-norm, so
the score is a plain dot product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    IndexFormatError,
    IndexFrozen,
    ValidationError,
)
from .providers import EmbeddingVector

_MAGIC = b"RSVI"
_VERSION = 1


@dataclass(frozen=True)
class IndexEntry:
    chunk_id: str
    vector: EmbeddingVector


@dataclass(frozen=True)
class SearchHit:
    chunk_id: str
    score: float


class VectorIndex:
    """Flat cosine index; single-writer build phase, immutable once frozen."""

    def __init__(self, dim: int | None = None):
        self._dim = dim
        self._ids: list[str] = []
        self._vectors: list[np.ndarray] = []
        self._id_set: set[str] = set()
        self._matrix: np.ndarray | None = None
        self._frozen = False

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def frozen(self) -> bool:
        return self._frozen

    def add(self, entries: list[IndexEntry]) -> int:
        """Add entries; duplicate chunk_ids and dimension changes are errors."""
        if self._frozen:
            raise IndexFrozen("cannot add to a frozen index")
        staged_ids: set[str] = set()
        for entry in entries:
            if self._dim is None:
                self._dim = entry.vector.dim
            elif entry.vector.dim != self._dim:
                raise DimensionMismatch(
                    f"entry {entry.chunk_id!r} has dim {entry.vector.dim}, index dim {self._dim}"
                )
            if entry.chunk_id in self._id_set or entry.chunk_id in staged_ids:
                raise DuplicateId(f"chunk_id {entry.chunk_id!r} already indexed")
            staged_ids.add(entry.chunk_id)
        for entry in entries:
            self._ids.append(entry.chunk_id)
            self._vectors.append(entry.vector.values)
            self._id_set.add(entry.chunk_id)
        self._matrix = None
        return len(entries)

    def freeze(self) -> None:
        self._frozen = True
        self._ensure_matrix()

    def _ensure_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._vectors) if self._vectors else np.empty((0, 0))
        return self._matrix

    def search(self, query: EmbeddingVector, k: int) -> list[SearchHit]:
        """Top-k by cosine descending, ties broken by chunk_id ascending."""
        if not self._ids:
            raise EmptyIndex("search on empty index")
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        if self._dim is not None and query.dim != self._dim:
            raise DimensionMismatch(f"query dim {query.dim} != index dim {self._dim}")
        scores = self._ensure_matrix() @ query.values
        order = sorted(range(len(self._ids)), key=lambda i: (-scores[i], self._ids[i]))
        return [SearchHit(self._ids[i], float(scores[i])) for i in order[: min(k, len(self._ids))]]

    def save(self, path: str | Path) -> None:
        """Serialize to a versioned binary file (magic, version, dim, count, entries)."""
        if self._dim is None:
            raise ValidationError("cannot save an index with no entries")
        path = Path(path)
        with path.open("wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<HII", _VERSION, self._dim, len(self._ids)))
            for chunk_id, vec in zip(self._ids, self._vectors):
                raw = chunk_id.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(np.asarray(vec, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        path = Path(path)
        data = path.read_bytes()
        if data[:4] != _MAGIC:
            raise IndexFormatError(f"{path}: not an index file (bad magic)")
        try:
            version, dim, count = struct.unpack_from("<HII", data, 4)
        except struct.error as exc:
            raise IndexFormatError(f"{path}: truncated header") from exc
        if version != _VERSION:
            raise IndexFormatError(f"{path}: unsupported version {version}")
        index = cls(dim=dim)
        offset = 4 + struct.calcsize("<HII")
        vec_bytes = dim * 8
        for _ in range(count):
            try:
                (id_len,) = struct.unpack_from("<H", data, offset)
            except struct.error as exc:
                raise IndexFormatError(f"{path}: truncated entry") from exc
            offset += 2
            end = offset + id_len + vec_bytes
            if end > len(data):
                raise IndexFormatError(f"{path}: truncated entry")
            chunk_id = data[offset : offset + id_len].decode("utf-8")
            vec = np.frombuffer(data, dtype="<f8", count=dim, offset=offset + id_len).copy()
            offset = end
            index.add([IndexEntry(chunk_id, EmbeddingVector(vec))])
        return index
