"""Nearest-centroid few-shot retrieval: exemplar sampling, queries, ranking."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .embed import EmbeddingMatrix
from .errors import DimensionMismatch, EmptyPool, ZeroVector

DEFAULT_KS = (1, 2, 4, 8, 16)
DEFAULT_SAMPLES = 5


@dataclass(frozen=True)
class ExemplarSet:
    species: str
    k: int
    window_ids: tuple
    sample_index: int
    seed: int

    @property
    def effective_k(self) -> int:
        return len(self.window_ids)


@dataclass(frozen=True)
class Query:
    species: str
    vector: np.ndarray
    source: str = "exemplar_centroid"
    exemplar_ids: tuple = ()

    def __post_init__(self):
        if self.source not in ("exemplar_centroid", "learned_representation"):
            raise ValueError(f"unknown query source {self.source!r}")
        vec = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise ValueError("query vector must be finite")
        object.__setattr__(self, "vector", vec)


@dataclass
class RankedList:
    query: Query
    ids: list
    scores: np.ndarray
    is_positive: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.ids)

    def split_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """(positive scores, negative scores)."""
        return self.scores[self.is_positive], self.scores[~self.is_positive]


def _rng(seed: int, species: str, k: int, sample_index: int) -> np.random.Generator:
    # independent stream per (species, k, sample) so results do not depend on the ks order
    return np.random.default_rng([seed, zlib.crc32(species.encode()), k, sample_index])


def sample_exemplar_sets(pool: Sequence[str], ks: Iterable[int] = DEFAULT_KS,
                         n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                         species: str = "") -> list[ExemplarSet]:
    """Draw ``n_samples`` exemplar sets per k, without replacement within a set.

    Pools smaller than k give sets of the whole pool size; the set's
    ``effective_k`` records that.
    """
    pool = sorted(pool)
    if not pool:
        raise EmptyPool(f"no exemplars available for {species or 'query'}")
    out = []
    for k in ks:
        size = min(k, len(pool))
        for s in range(n_samples):
            idx = _rng(seed, species, k, s).choice(len(pool), size=size, replace=False)
            out.append(ExemplarSet(species, k, tuple(pool[i] for i in idx), s, seed))
    return out


def build_centroid_query(exemplars: np.ndarray, species: str = "", normalize_first: bool = False,
                         exemplar_ids: Sequence[str] = ()) -> Query:
    """Mean of the exemplar embeddings.

    With ``normalize_first`` each exemplar is scaled to unit length before
    averaging.
    """
    rows = np.asarray(exemplars, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DimensionMismatch("need a non-empty (k, d) block of exemplar embeddings")
    if normalize_first:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ZeroVector("cannot normalize a zero exemplar embedding")
        rows = rows / norms
    return Query(species, rows.mean(axis=0), "exemplar_centroid", tuple(exemplar_ids))


def cosine_score(q, c) -> float:
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if q.shape != c.shape:
        raise DimensionMismatch(f"vectors of length {q.shape} and {c.shape}")
    nq, nc = np.linalg.norm(q), np.linalg.norm(c)
    if nq == 0 or nc == 0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(q, c) / (nq * nc), -1.0, 1.0))


def cosine_scores(q: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Cosine of ``q`` against every row; zero rows score 0."""
    q = np.asarray(q, dtype=np.float64)
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query d={q.shape[0]}, corpus d={m.shape[1]}")
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ZeroVector("query vector is zero")
    norms = np.linalg.norm(m, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        # row-wise reduction: a row's score does not depend on which rows share its batch
        scores = (m * q).sum(axis=1) / (norms * nq)
    scores[norms == 0] = 0.0
    return np.clip(scores, -1.0, 1.0)


def rank_candidates(q: Query, corpus: EmbeddingMatrix, positives: Callable[[str], bool] | None = None,
                    exclude: Iterable[str] | None = None) -> RankedList:
    """Score every candidate and sort by descending cosine, ties by id.

    Candidates in ``exclude`` (by default the query's own exemplar ids) are
    left out.
    """
    skip = set(q.exemplar_ids if exclude is None else exclude)
    keep = [i for i, wid in enumerate(corpus.ids) if wid not in skip]
    ids = [corpus.ids[i] for i in keep]
    scores = cosine_scores(q.vector, corpus.vectors[keep]) if keep else np.zeros(0)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    ids = [ids[i] for i in order]
    scores = scores[order] if order else scores
    flags = np.array([bool(positives(i)) for i in ids], dtype=bool) if positives else \
        np.zeros(len(ids), dtype=bool)
    return RankedList(q, ids, scores, flags)
