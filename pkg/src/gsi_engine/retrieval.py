"""Exact top-k cosine retrieval over embedded passages.

A brute-force scan is deliberate: corpora here are tens of thousands of
passages at most, and evaluation correctness matters more than latency.
Ties break by ascending passage_id so results reproduce across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EngineError
from .gateway import EmbeddingVector

INDEX_FORMAT = "gsi-vector-index"
INDEX_VERSION = 1
DEFAULT_TOP_K = 5


class RetrievalError(EngineError):
    code = "retrieval_error"


class DimMismatch(RetrievalError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"dimension mismatch: expected {expected}, got {got}")


class ZeroVector(RetrievalError):
    def __init__(self, passage_id: str = ""):
        super().__init__(f"zero-norm vector{': ' + passage_id if passage_id else ''}")


class DuplicatePassage(RetrievalError):
    def __init__(self, passage_id: str):
        super().__init__(f"duplicate passage_id: {passage_id}")


class EmptyIndex(RetrievalError):
    def __init__(self):
        super().__init__("index has no entries")


class IndexParseError(RetrievalError):
    pass


class VersionMismatch(RetrievalError):
    def __init__(self, got):
        super().__init__(f"unsupported index version: {got}")


class ModelMismatch(RetrievalError):
    def __init__(self, index_model: str, expected: str):
        super().__init__(
            f"index was built with embed model {index_model!r}, expected {expected!r}",
            index_model=index_model,
            expected=expected,
        )


@dataclass(frozen=True)
class RetrievalHit:
    passage_id: str
    score: float
    rank: int


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding."""
    if a.dim != b.dim:
        raise DimMismatch(a.dim, b.dim)
    av = np.asarray(a.values, dtype=np.float64)
    bv = np.asarray(b.values, dtype=np.float64)
    norm_a = float(np.linalg.norm(av))
    norm_b = float(np.linalg.norm(bv))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector()
    value = float(np.dot(av, bv)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


class VectorIndex:
    """Immutable exact-search index of (passage_id, vector) entries."""

    def __init__(self, passage_ids: list[str], matrix: np.ndarray, embed_model: str):
        self.passage_ids = passage_ids
        self.matrix = matrix
        self.norms = np.linalg.norm(matrix, axis=1)
        self.embed_model = embed_model

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.passage_ids)

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._id_set

    @property
    def _id_set(self) -> frozenset[str]:
        cached = getattr(self, "_ids_cache", None)
        if cached is None:
            cached = frozenset(self.passage_ids)
            object.__setattr__(self, "_ids_cache", cached)
        return cached


def build_index(passage_ids: Sequence[str], vectors: Sequence[EmbeddingVector], embed_model: str = "unknown") -> VectorIndex:
    """Build an index; rejects mixed dims, duplicates, and zero vectors."""
    if len(passage_ids) != len(vectors):
        raise RetrievalError(f"{len(passage_ids)} ids but {len(vectors)} vectors")
    if not vectors:
        raise EmptyIndex()
    dim = vectors[0].dim
    seen: set[str] = set()
    for pid, vector in zip(passage_ids, vectors):
        if vector.dim != dim:
            raise DimMismatch(dim, vector.dim)
        if pid in seen:
            raise DuplicatePassage(pid)
        seen.add(pid)
    matrix = np.asarray([v.values for v in vectors], dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    for pid, norm in zip(passage_ids, norms):
        if norm == 0.0:
            raise ZeroVector(pid)
    return VectorIndex(list(passage_ids), matrix, embed_model)


def query(index: VectorIndex, query_vector: EmbeddingVector, k: int = DEFAULT_TOP_K) -> list[RetrievalHit]:
    """Exact top-k by cosine, descending; ties break by ascending passage_id."""
    if len(index) == 0:
        raise EmptyIndex()
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    if query_vector.dim != index.dim:
        raise DimMismatch(index.dim, query_vector.dim)
    qv = np.asarray(query_vector.values, dtype=np.float64)
    qnorm = float(np.linalg.norm(qv))
    if qnorm == 0.0:
        raise ZeroVector()
    scores = (index.matrix @ qv) / (index.norms * qnorm)
    scores = np.clip(scores, -1.0, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.passage_ids[i]))
    top = order[: min(k, len(index))]
    return [
        RetrievalHit(passage_id=index.passage_ids[i], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(top, start=1)
    ]


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Persist as jsonl: a header line, then one (passage_id, values) line per entry."""
    header = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "dim": index.dim,
        "count": len(index),
        "embed_model": index.embed_model,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps(header) + "\n")
        for pid, row in zip(index.passage_ids, index.matrix):
            handle.write(json.dumps({"passage_id": pid, "values": row.tolist()}) + "\n")


def load_index(path: str | Path, expected_embed_model: str | None = None) -> VectorIndex:
    """Load a saved index; refuses a different version or embed model."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as handle:
            header_line = handle.readline()
            header = json.loads(header_line)
            if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
                raise IndexParseError("not a vector index file")
            if header.get("version") != INDEX_VERSION:
                raise VersionMismatch(header.get("version"))
            ids: list[str] = []
            rows: list[list[float]] = []
            for line in handle:
                if not line.strip():
                    continue
                entry = json.loads(line)
                ids.append(entry["passage_id"])
                rows.append(entry["values"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IndexParseError(f"corrupt index file: {exc}") from exc
    if len(ids) != header.get("count"):
        raise IndexParseError(f"header count {header.get('count')} != {len(ids)} entries")
    if expected_embed_model is not None and header["embed_model"] != expected_embed_model:
        raise ModelMismatch(header["embed_model"], expected_embed_model)
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != header.get("dim"):
        raise IndexParseError("entry dimensions disagree with header")
    return VectorIndex(ids, matrix, header["embed_model"])


def embed_and_index(
    passage_ids: Sequence[str],
    texts: Sequence[str],
    gateway,
    batch_size: int = 64,
) -> VectorIndex:
    """Embed texts through the gateway and build the index in one pass."""
    vectors: list[EmbeddingVector] = []
    for start in range(0, len(texts), batch_size):
        vectors.extend(gateway.embed(texts[start : start + batch_size]))
    return build_index(passage_ids, vectors, embed_model=gateway.embed_model_name)
