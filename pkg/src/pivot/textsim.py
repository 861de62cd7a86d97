"""Deterministic text embeddings and the similarity kernels used everywhere.

The embedder is a seeded stand-in for a real sentence encoder: it hashes the
string into a stream seed and draws a fixed-distribution vector, rescaled so
norms land in [0.8, 1.6]. Magnitude is meaningful downstream (the clip-keep
threshold uses raw dot products), so vectors are deliberately unnormalized.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

NORM_LO = 0.8
NORM_HI = 1.6

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredLabel:
    step_id: int
    score: float


def _text_stream_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def embed_text(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Map a string to a deterministic unnormalized vector of length ``dim``.

    Pure function of (text, dim, seed); equal strings map to equal vectors.
    """
    if dim <= 0:
        raise SimilarityError(f"dim must be positive, got {dim}")
    rng = np.random.default_rng([_text_stream_seed(text), seed & 0xFFFFFFFF])
    v = rng.standard_normal(dim)
    target = rng.uniform(NORM_LO, NORM_HI)
    norm = np.linalg.norm(v)
    if norm == 0.0:  # unreachable for dim >= 1 in practice
        v[0] = 1.0
        norm = 1.0
    return v * (target / norm)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SimilarityError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SimilarityError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise SimilarityError("cosine is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def top_k(
    query: np.ndarray,
    candidates: np.ndarray,
    k: int,
    metric: str = "cosine",
) -> list[ScoredLabel]:
    """Highest-scoring candidate indices, score descending, ties to lower index.

    ``candidates`` is a (n, dim) matrix; rows are candidate vectors.
    """
    if k < 1:
        raise SimilarityError(f"k must be >= 1, got {k}")
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise SimilarityError("candidates must be a non-empty (n, dim) matrix")
    query = np.asarray(query, dtype=float)
    if query.shape != (candidates.shape[1],):
        raise SimilarityError(
            f"query dim {query.shape} does not match candidates {candidates.shape}"
        )
    scores = scores_against(query, candidates, metric)
    # stable sort on -score keeps lower index first among ties
    order = np.argsort(-scores, kind="stable")[: min(k, len(scores))]
    return [ScoredLabel(int(i), float(scores[i])) for i in order]


def scores_against(query: np.ndarray, candidates: np.ndarray, metric: str) -> np.ndarray:
    """Vector of similarity scores of ``query`` against each candidate row."""
    if metric == "dot":
        return candidates @ query
    if metric == "cosine":
        qn = np.linalg.norm(query)
        if qn == 0.0:
            raise SimilarityError("cosine is undefined for a zero query")
        cn = np.linalg.norm(candidates, axis=1)
        if np.any(cn == 0.0):
            raise SimilarityError("cosine is undefined for a zero candidate")
        return (candidates @ query) / (cn * qn)
    raise SimilarityError(f"unknown metric {metric!r}")


def save_embedding_table(path, table: np.ndarray) -> None:
    """Write a (rows, dim) table as the binary float32 exchange format."""
    table = np.asarray(table, dtype="<f4")
    if table.ndim != 2:
        raise SimilarityError("embedding table must be 2-dimensional")
    rows, dim = table.shape
    with open(path, "wb") as fh:
        fh.write(PEMB_MAGIC)
        fh.write(struct.pack("<III", PEMB_VERSION, rows, dim))
        fh.write(table.tobytes(order="C"))


def load_embedding_table(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != PEMB_MAGIC:
            raise SimilarityError(f"{path}: not an embedding table (bad magic)")
        version, rows, dim = struct.unpack("<III", header[4:])
        if version != PEMB_VERSION:
            raise SimilarityError(f"{path}: unsupported table version {version}")
        payload = fh.read(rows * dim * 4)
        if len(payload) != rows * dim * 4:
            raise SimilarityError(f"{path}: truncated table payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(float)
