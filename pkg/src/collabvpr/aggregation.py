"""Local descriptor aggregation: codebooks, hard VLAD and soft (NetVLAD-style) assignment.

All arithmetic is carried out in float64. Descriptors are kept cluster-structured
(``K x d``) so that cluster-wise fusion can operate on the intra-normalized blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

DEFAULT_SOFTNESS = 30.0
DEFAULT_NUM_CLUSTERS = 32

AggregationMode = Literal["hard", "soft"]

_CHUNK_ELEMENTS = 1 << 22


class InsufficientSamplesError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return ``(v / ||v||, degenerate)``; the zero vector maps to zero and is flagged."""
    norm = float(np.sqrt(np.dot(v, v)))
    if norm == 0.0:
        return np.zeros_like(v), True
    return v / norm, False


def intra_normalize(clusters: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("kd,kd->k", clusters, clusters))
    safe = np.where(norms == 0.0, 1.0, norms)
    return clusters / safe[:, None]


@dataclass(frozen=True)
class LocalDescriptorSet:
    """M local features of one image (rows), standing in for CNN feature-map output."""

    data: np.ndarray
    image_id: object = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"local descriptors must be a non-empty M x d matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("local descriptors contain non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Codebook:
    """K centroids plus the soft-assignment sharpness.

    The linear soft-assignment parameters are tied to the centroids,
    ``w_k = 2 * softness * c_k`` and ``b_k = -softness * ||c_k||^2``, and are
    always derived on demand.
    """

    centroids: np.ndarray
    softness: float = DEFAULT_SOFTNESS

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] < 1:
            raise ValueError(f"codebook needs at least 2 centroids as a K x d matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids contain non-finite entries")
        softness = float(self.softness)
        if not (softness > 0.0 and np.isfinite(softness)):
            raise ValueError(f"softness must be positive and finite, got {self.softness}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "softness", softness)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return 2.0 * self.softness * self.centroids

    @property
    def biases(self) -> np.ndarray:
        return -self.softness * np.einsum("kd,kd->k", self.centroids, self.centroids)

    def with_params(self, centroids: np.ndarray | None = None, softness: float | None = None) -> "Codebook":
        return Codebook(
            self.centroids if centroids is None else centroids,
            self.softness if softness is None else softness,
        )


@dataclass(frozen=True)
class GlobalDescriptor:
    """Cluster-structured place descriptor.

    ``clusters`` holds the K intra-normalized blocks (each unit norm or zero) and
    ``flat`` the globally unit-normalized vector used for retrieval. Build with
    :meth:`from_clusters` or :meth:`from_flat` rather than directly.
    """

    clusters: np.ndarray
    flat: np.ndarray
    degenerate: bool = field(default=False)

    @classmethod
    def from_clusters(cls, clusters: np.ndarray) -> "GlobalDescriptor":
        """Intra-normalize the residual sums, concatenate, and normalize globally."""
        blocks = intra_normalize(np.asarray(clusters, dtype=np.float64))
        flat, degenerate = l2_normalize(blocks.reshape(-1))
        return cls._frozen(blocks, flat, degenerate)

    @classmethod
    def from_flat(cls, flat: np.ndarray, num_clusters: int, renormalize: bool = True) -> "GlobalDescriptor":
        """Wrap an existing flat vector; clusters are its blocks, re-intra-normalized.

        With ``renormalize=False`` the flat vector is stored as given (callers that
        already normalized it).
        """
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if num_clusters < 1 or flat.size % num_clusters:
            raise DimensionMismatchError(
                f"flat length {flat.size} is not divisible into {num_clusters} clusters"
            )
        if renormalize:
            flat, degenerate = l2_normalize(flat)
        else:
            degenerate = not np.any(flat)
        blocks = intra_normalize(flat.reshape(num_clusters, -1))
        return cls._frozen(blocks, flat, degenerate)

    @classmethod
    def _frozen(cls, blocks, flat, degenerate):
        blocks = np.array(blocks)
        flat = np.array(flat)
        blocks.setflags(write=False)
        flat.setflags(write=False)
        return cls(blocks, flat, bool(degenerate))

    @property
    def num_clusters(self) -> int:
        return self.clusters.shape[0]

    @property
    def dim(self) -> int:
        return self.clusters.shape[1]

    def __len__(self) -> int:
        return self.flat.size


def _check_dim(x: np.ndarray, codebook: Codebook) -> None:
    if x.shape[-1] != codebook.dim:
        raise DimensionMismatchError(
            f"descriptor dimension {x.shape[-1]} does not match codebook dimension {codebook.dim}"
        )


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, rows of ``x`` against rows of ``centroids``.

    Computed from explicit differences (not the ``|x|^2 - 2x.c + |c|^2`` expansion)
    so exact ties stay exact; rows are processed in chunks to bound memory.
    """
    k, d = centroids.shape
    out = np.empty((x.shape[0], k))
    step = max(1, _CHUNK_ELEMENTS // max(1, k * d))
    for start in range(0, x.shape[0], step):
        diff = x[start : start + step, None, :] - centroids[None, :, :]
        out[start : start + step] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def hard_assign(x: np.ndarray, codebook: Codebook) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_dim(x, codebook)
    return int(np.argmin(squared_distances(x[None, :], codebook.centroids)[0]))


def hard_assignment_matrix(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    idx = np.argmin(squared_distances(x, codebook.centroids), axis=1)
    a = np.zeros((x.shape[0], codebook.num_clusters))
    a[np.arange(x.shape[0]), idx] = 1.0
    return a


def soft_logits(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    return x @ codebook.weights.T + codebook.biases[None, :]


def soft_assignment_matrix(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Row-wise softmax of ``w_k . x + b_k`` with the max logit subtracted first."""
    logits = soft_logits(x, codebook)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def soft_assign(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_dim(x, codebook)
    return soft_assignment_matrix(x[None, :], codebook)[0]


def residual_sums(x: np.ndarray, assignment: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``V_k = sum_i a_ik (x_i - c_k)`` for all k at once."""
    return assignment.T @ x - assignment.sum(axis=0)[:, None] * centroids


def aggregate(
    descriptors: LocalDescriptorSet, codebook: Codebook, mode: AggregationMode = "soft"
) -> GlobalDescriptor:
    """Pool a local descriptor set into a VLAD vector (hard) or its soft relaxation."""
    x = descriptors.data
    _check_dim(x, codebook)
    if mode == "hard":
        a = hard_assignment_matrix(x, codebook)
    elif mode == "soft":
        a = soft_assignment_matrix(x, codebook)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return GlobalDescriptor.from_clusters(residual_sums(x, a, codebook.centroids))


def kmeans_objective(points: np.ndarray, centroids: np.ndarray) -> float:
    return float(squared_distances(points, centroids).min(axis=1).sum())


@dataclass(frozen=True)
class CodebookFit:
    codebook: Codebook
    inertia: float
    history: tuple[float, ...]
    iterations: int


def _stack_samples(samples: Iterable[LocalDescriptorSet | np.ndarray]) -> np.ndarray:
    mats = [s.data if isinstance(s, LocalDescriptorSet) else np.asarray(s, dtype=np.float64) for s in samples]
    if not mats:
        raise InsufficientSamplesError("insufficient samples: no descriptor sets given")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise DimensionMismatchError(f"descriptor sets disagree on dimension: {sorted(dims)}")
    return np.vstack(mats).astype(np.float64, copy=False)


def _kmeanspp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(points.shape[0])]]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = int(rng.choice(points.shape[0], p=closest / total))
        centers.append(points[idx])
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_codebook_detailed(
    samples: Sequence[LocalDescriptorSet | np.ndarray],
    num_clusters: int = DEFAULT_NUM_CLUSTERS,
    seed: int = 0,
    softness: float = DEFAULT_SOFTNESS,
    max_iter: int = 100,
) -> CodebookFit:
    """Lloyd's k-means with k-means++ seeding, returning the objective trace too.

    ``history[t]`` is the within-cluster squared error after the assignment step
    of iteration ``t``; it is non-increasing.
    """
    points = _stack_samples(samples)
    distinct = np.unique(points, axis=0)
    if distinct.shape[0] < num_clusters:
        raise InsufficientSamplesError(
            f"insufficient samples: {distinct.shape[0]} distinct points for {num_clusters} clusters"
        )
    rng = np.random.default_rng(seed)
    # seeding over distinct rows guarantees K distinct starting centroids
    centroids = _kmeanspp_seed(distinct, num_clusters, rng)
    history: list[float] = []
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        d2 = squared_distances(points, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(points.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=num_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        updated = centroids.copy()
        nonempty = counts > 0
        updated[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            # re-seed an empty cluster at the point currently worst served
            far = int(np.argmax(squared_distances(points, updated).min(axis=1)))
            updated[k] = points[far]
        centroids = updated
    return CodebookFit(Codebook(centroids, softness), history[-1], tuple(history), it)


def fit_codebook(
    samples: Sequence[LocalDescriptorSet | np.ndarray],
    num_clusters: int = DEFAULT_NUM_CLUSTERS,
    seed: int = 0,
    softness: float = DEFAULT_SOFTNESS,
    max_iter: int = 100,
) -> Codebook:
    return fit_codebook_detailed(samples, num_clusters, seed, softness, max_iter).codebook
