"""Exact top-K place retrieval, the score re-ordering baseline, and recall@K evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .aggregation import DimensionMismatchError, GlobalDescriptor

DEFAULT_KS = (1, 5, 10)
OUTDOOR_THRESHOLD_M = 20.0
INDOOR_THRESHOLD_M = 1.5


class DuplicateIdError(ValueError):
    pass


def _as_flat(d) -> np.ndarray:
    if isinstance(d, GlobalDescriptor):
        return d.flat
    return np.asarray(d, dtype=np.float64).reshape(-1)


class ReferenceDatabase:
    """Immutable reference set of ``(place_id, pose, descriptor)`` entries.

    Insertion order is kept and used to break distance ties.
    """

    __slots__ = ("_ids", "_poses", "_descriptors", "_index")

    def __init__(self, ids: Sequence, poses: np.ndarray, descriptors: np.ndarray):
        ids = tuple(ids)
        poses = np.array(poses, dtype=np.float64).reshape(len(ids), 2)
        descriptors = np.array(descriptors, dtype=np.float64)
        if not ids:
            raise ValueError("reference database needs at least one entry")
        if descriptors.ndim != 2 or descriptors.shape[0] != len(ids):
            raise DimensionMismatchError("descriptor matrix does not match entry count")
        index = {}
        for i, pid in enumerate(ids):
            if pid in index:
                raise DuplicateIdError(f"duplicate place id {pid!r}")
            index[pid] = i
        poses.setflags(write=False)
        descriptors.setflags(write=False)
        self._ids = ids
        self._poses = poses
        self._descriptors = descriptors
        self._index = index

    def __len__(self) -> int:
        return len(self._ids)

    def __setattr__(self, name, value):
        if hasattr(self, "_index"):
            raise AttributeError("ReferenceDatabase is immutable")
        object.__setattr__(self, name, value)

    @property
    def ids(self) -> tuple:
        return self._ids

    @property
    def poses(self) -> np.ndarray:
        return self._poses

    @property
    def descriptors(self) -> np.ndarray:
        return self._descriptors

    @property
    def dim(self) -> int:
        return self._descriptors.shape[1]

    def position(self, place_id) -> int:
        return self._index[place_id]

    def squared_distances(self, q) -> np.ndarray:
        q = _as_flat(q)
        if q.size != self.dim:
            raise DimensionMismatchError(f"query length {q.size} does not match database length {self.dim}")
        diff = self._descriptors - q[None, :]
        return np.einsum("nd,nd->n", diff, diff)


def build_database(items: Iterable[tuple[object, Sequence[float], object]]) -> ReferenceDatabase:
    """Build from ``(id, (x, y), descriptor)`` triples; descriptors may be GlobalDescriptor or arrays."""
    items = list(items)
    if not items:
        raise ValueError("reference database needs at least one entry")
    flats = [_as_flat(d) for _, _, d in items]
    if len({f.size for f in flats}) != 1:
        raise DimensionMismatchError("reference descriptors have differing lengths")
    return ReferenceDatabase([i for i, _, _ in items], [p for _, p, _ in items], np.stack(flats))


@dataclass(frozen=True)
class RankedEntry:
    place_id: object
    score: float
    pose: tuple[float, float]


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[RankedEntry, ...]

    @property
    def ids(self) -> list:
        return [r.place_id for r in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)


def _similarity_from_sqdist(d2: np.ndarray, agents: int = 1) -> np.ndarray:
    # equals the dot product for unit vectors; monotone in d2 so exact ranking is preserved
    return agents - 0.5 * d2


def _ranked(db: ReferenceDatabase, total_sqdist: np.ndarray, k_top: int, agents: int) -> RetrievalResult:
    if k_top < 1:
        raise ValueError("k_top must be at least 1")
    order = np.argsort(total_sqdist, kind="stable")[: min(k_top, len(db))]
    scores = _similarity_from_sqdist(total_sqdist[order], agents)
    return RetrievalResult(
        tuple(
            RankedEntry(db.ids[i], float(s), (float(db.poses[i, 0]), float(db.poses[i, 1])))
            for i, s in zip(order, scores)
        )
    )


def query_topk(db: ReferenceDatabase, q, k_top: int) -> RetrievalResult:
    """Exact linear scan by squared L2 distance; ties resolve to insertion order.

    Scores are reported as similarities ``1 - d^2 / 2`` (the dot product for unit vectors).
    """
    return _ranked(db, db.squared_distances(q), k_top, 1)


def query_reordering(db: ReferenceDatabase, group: Sequence, k_top: int) -> RetrievalResult:
    """Rank by the sum of every agent's similarity to each reference.

    Summing ``1 - d_n^2/2`` over agents orders exactly like ascending ``sum_n d_n^2``,
    which is what is sorted, so a one-agent group reproduces :func:`query_topk`.
    """
    group = list(group)
    if not group:
        raise ValueError("re-ordering needs at least one descriptor")
    total = np.zeros(len(db))
    for q in group:
        total += db.squared_distances(q)
    return _ranked(db, total, k_top, len(group))


@dataclass(frozen=True)
class EvalReport:
    recall_at: Mapping[int, float]
    error_at: Mapping[int, float]
    correct_at: Mapping[int, int]
    num_queries: int
    threshold_m: float

    def as_rows(self) -> list[tuple[int, int, float, float]]:
        return [(k, self.correct_at[k], self.recall_at[k], self.error_at[k]) for k in sorted(self.recall_at)]


def evaluate(
    db: ReferenceDatabase,
    queries: Sequence[tuple[Sequence[float], RetrievalResult]],
    threshold_m: float = OUTDOOR_THRESHOLD_M,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Recall@K with the ego pose as ground truth.

    A query is correct at K if any of its first K retrievals lies strictly closer
    than ``threshold_m`` meters to the ego pose.
    """
    if not queries:
        raise ValueError("evaluation needs at least one query")
    ks = sorted(set(int(k) for k in ks))
    need = max(ks)
    correct = {k: 0 for k in ks}
    for ego_pose, result in queries:
        if len(result) < need and len(result) != len(db):
            raise ValueError(f"retrieval result of length {len(result)} is shorter than K={need}")
        ego = np.asarray(ego_pose, dtype=np.float64)
        poses = np.array([r.pose for r in result.ranked], dtype=np.float64).reshape(-1, 2)
        hits = np.hypot(poses[:, 0] - ego[0], poses[:, 1] - ego[1]) < threshold_m
        first = int(np.argmax(hits)) if hits.any() else None
        for k in ks:
            if first is not None and first < k:
                correct[k] += 1
    total = len(queries)
    recall = {k: correct[k] / total for k in ks}
    return EvalReport(
        recall_at=recall,
        error_at={k: 1.0 - recall[k] for k in ks},
        correct_at=correct,
        num_queries=total,
        threshold_m=float(threshold_m),
    )


def mean_report(reports: Sequence[EvalReport]) -> dict[int, float]:
    """Mean recall@K over independently seeded runs."""
    ks = sorted(reports[0].recall_at)
    return {k: float(np.mean([r.recall_at[k] for r in reports])) for k in ks}
