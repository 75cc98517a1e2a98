"""Triplet-loss training of the soft-assignment codebook through multi-agent fusion.

The trainable state is ``(centroids, softness)``; gradients are derived by hand
and propagated through soft assignment, residual pooling, intra- and global
normalization, the similarity-regularized fusion (with the similarity weights
differentiated, not frozen) and the hinge loss. :func:`gradcheck` compares them
against central finite differences of the plain forward pipeline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .aggregation import (
    Codebook,
    LocalDescriptorSet,
    aggregate,
    residual_sums,
    soft_assignment_matrix,
)
from .fusion import FusionMode, fuse_descriptors

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.1
MIN_SOFTNESS = 1e-6


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TripletItem:
    """One query group with its weakly-labelled references.

    ``query[0]`` is the ego view; the rest are collaborator views.
    """

    query: tuple[LocalDescriptorSet, ...]
    positives: tuple[LocalDescriptorSet, ...]
    negatives: tuple[LocalDescriptorSet, ...]

    def __post_init__(self):
        for name in ("query", "positives", "negatives"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.query:
            raise ValueError("triplet item needs an ego view")
        if not self.positives or not self.negatives:
            raise ValueError("triplet item needs at least one positive and one negative")


@dataclass(frozen=True)
class TripletBatch:
    items: tuple[TripletItem, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))


def triplet_loss(dq_p: float, dq_n: Sequence[float], margin: float = DEFAULT_MARGIN) -> float:
    """``sum_j max(0, dq_p + margin - dq_n[j])`` over squared distances."""
    if len(dq_n) == 0:
        raise ValueError("triplet loss needs at least one negative")
    if margin <= 0:
        raise ValueError("margin must be positive")
    return float(sum(max(0.0, dq_p + margin - dn) for dn in dq_n))


# ---------------------------------------------------------------------------
# forward pipeline (used for training losses and as the finite-difference oracle)


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(np.dot(diff, diff))


def item_loss(item: TripletItem, codebook: Codebook, fusion_mode, margin: float = DEFAULT_MARGIN) -> float | None:
    """Loss of one item via the public aggregation/fusion path; ``None`` if degenerate."""
    agents = [aggregate(s, codebook, "soft") for s in item.query]
    pos = [aggregate(s, codebook, "soft") for s in item.positives]
    neg = [aggregate(s, codebook, "soft") for s in item.negatives]
    if any(d.degenerate for d in agents + pos + neg):
        return None
    yq = fuse_descriptors(agents[0], agents[1:], fusion_mode).flat
    dp = min(_sqdist(yq, p.flat) for p in pos)
    return triplet_loss(dp, [_sqdist(yq, n.flat) for n in neg], margin)


def batch_loss(batch: TripletBatch, codebook: Codebook, fusion_mode, margin: float = DEFAULT_MARGIN) -> float:
    losses = [item_loss(it, codebook, fusion_mode, margin) for it in batch.items]
    losses = [l for l in losses if l is not None]
    return float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# analytic gradients


def _normalize_backward(unit: np.ndarray, norm, grad: np.ndarray) -> np.ndarray:
    """Backward of ``v -> v/|v|`` along the last axis; zero vectors pass zero gradient."""
    norm = np.asarray(norm, dtype=np.float64)
    proj = grad - unit * np.sum(unit * grad, axis=-1, keepdims=True)
    safe = np.where(norm == 0.0, 1.0, norm)
    out = proj / np.expand_dims(safe, -1)
    return np.where(np.expand_dims(norm, -1) == 0.0, 0.0, out)


@dataclass
class _VladCache:
    x: np.ndarray
    assign: np.ndarray
    cluster_norms: np.ndarray
    clusters: np.ndarray  # intra-normalized, K x d
    global_norm: float
    flat: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.global_norm == 0.0


def _vlad_forward(x: np.ndarray, codebook: Codebook) -> _VladCache:
    a = soft_assignment_matrix(x, codebook)
    v = residual_sums(x, a, codebook.centroids)
    vn = np.sqrt(np.einsum("kd,kd->k", v, v))
    u = v / np.where(vn == 0.0, 1.0, vn)[:, None]
    flat = u.reshape(-1)
    gn = float(np.sqrt(np.dot(flat, flat)))
    y = flat / gn if gn > 0 else np.zeros_like(flat)
    return _VladCache(x, a, vn, u, gn, y)


def _vlad_backward(cache: _VladCache, g_clusters: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, float]:
    """Gradient w.r.t. (centroids, softness) given the gradient on the intra-normalized clusters."""
    c = codebook.centroids
    alpha = codebook.softness
    x, a = cache.x, cache.assign
    g_v = _normalize_backward(cache.clusters, cache.cluster_norms, g_clusters)
    # V_k = sum_i a_ik x_i - (sum_i a_ik) c_k
    g_a = x @ g_v.T - np.einsum("kd,kd->k", g_v, c)[None, :]
    g_c = -a.sum(axis=0)[:, None] * g_v
    # softmax over k of logits 2*alpha*c_k.x - alpha*|c_k|^2
    g_logit = a * (g_a - np.sum(a * g_a, axis=1, keepdims=True))
    g_c += 2.0 * alpha * (g_logit.T @ x - g_logit.sum(axis=0)[:, None] * c)
    base = 2.0 * (x @ c.T) - np.einsum("kd,kd->k", c, c)[None, :]
    g_alpha = float(np.sum(g_logit * base))
    return g_c, g_alpha


def _flat_grad_to_clusters(cache: _VladCache, g_flat: np.ndarray) -> np.ndarray:
    unit = cache.flat
    g = _normalize_backward(unit, cache.global_norm, g_flat)
    return g.reshape(cache.clusters.shape)


def _fuse_forward_backward(agents: list[_VladCache], mode: FusionMode):
    """Return ``(y_query, backward, boundary)``.

    ``backward(g_yq)`` yields per-agent gradients on the intra-normalized clusters;
    ``boundary`` is the smallest |similarity| seen by the clamp (``inf`` if none).
    """
    ego = agents[0]
    collabs = agents[1:]
    n = len(collabs)
    if mode is FusionMode.NONE or (n == 0 and mode in (FusionMode.GLOBAL, FusionMode.CLUSTERWISE)):

        def backward(g):
            return [_flat_grad_to_clusters(ego, g)] + [np.zeros_like(c.clusters) for c in collabs]

        return ego.flat, backward, math.inf

    if mode is FusionMode.AVERAGE:
        z = np.mean([a.flat for a in agents], axis=0)
        zn = float(np.sqrt(np.dot(z, z)))
        yq = z / zn

        def backward(g):
            g_z = _normalize_backward(yq, zn, g)
            return [_flat_grad_to_clusters(a, g_z / (n + 1)) for a in agents]

        return yq, backward, math.inf

    if mode is FusionMode.GLOBAL:
        y0 = ego.flat
        dots = np.array([float(np.dot(y0, c.flat)) for c in collabs])
        gam = np.maximum(dots, 0.0)
        z = y0 + sum(g * c.flat for g, c in zip(gam, collabs)) / n
        zn = float(np.sqrt(np.dot(z, z)))
        yq = z / zn

        def backward(g):
            g_z = _normalize_backward(yq, zn, g)
            g_y0 = g_z.copy()
            g_ys = []
            for d, gm, c in zip(dots, gam, collabs):
                g_yn = (gm / n) * g_z
                if d > 0:
                    g_gamma = float(np.dot(c.flat, g_z)) / n
                    g_y0 += g_gamma * c.flat
                    g_yn += g_gamma * y0
                g_ys.append(g_yn)
            return [_flat_grad_to_clusters(ego, g_y0)] + [
                _flat_grad_to_clusters(c, gy) for c, gy in zip(collabs, g_ys)
            ]

        return yq, backward, float(np.min(np.abs(dots)))

    # cluster-wise
    u0 = ego.clusters
    dots = np.stack([np.einsum("kd,kd->k", u0, c.clusters) for c in collabs])  # N x K
    gam = np.maximum(dots, 0.0)
    z = u0 + np.einsum("nk,nkd->kd", gam, np.stack([c.clusters for c in collabs])) / n
    zn = np.sqrt(np.einsum("kd,kd->k", z, z))
    fk = z / np.where(zn == 0.0, 1.0, zn)[:, None]
    flat = fk.reshape(-1)
    fn = float(np.sqrt(np.dot(flat, flat)))
    yq = flat / fn
    # ego clusters that are exactly zero give dot 0 through no fault of the inputs' position
    live = np.broadcast_to(ego.cluster_norms > 0, dots.shape)
    boundary = float(np.min(np.abs(dots[live]))) if live.any() else math.inf

    def backward(g):
        g_f = _normalize_backward(yq, fn, g).reshape(fk.shape)
        g_z = _normalize_backward(fk, zn, g_f)
        g_u0 = g_z.copy()
        out = []
        for i, c in enumerate(collabs):
            g_un = (gam[i] / n)[:, None] * g_z
            active = dots[i] > 0
            g_gamma = np.einsum("kd,kd->k", c.clusters, g_z) / n * active
            g_u0 += g_gamma[:, None] * c.clusters
            g_un += g_gamma[:, None] * u0
            out.append(g_un)
        return [g_u0] + out

    return yq, backward, boundary


@dataclass(frozen=True)
class ForwardBackwardResult:
    loss: float
    grad_centroids: np.ndarray
    grad_softness: float
    skipped: int
    # per-item losses in batch order, None for skipped items
    item_losses: tuple
    # distance of this evaluation point to the nearest kink (hinge, clamp, best-positive switch)
    boundary: float


def forward_backward(
    batch: TripletBatch,
    codebook: Codebook,
    fusion_mode=FusionMode.GLOBAL,
    margin: float = DEFAULT_MARGIN,
) -> ForwardBackwardResult:
    """Mean triplet loss over the batch and its exact gradient.

    Items containing a degenerate (all-zero) descriptor are skipped and counted.
    """
    mode = FusionMode(fusion_mode)
    g_c = np.zeros_like(codebook.centroids)
    g_alpha = 0.0
    total = 0.0
    used = 0
    skipped = 0
    boundary = math.inf
    item_losses = []
    for item in batch.items:
        agents = [_vlad_forward(s.data, codebook) for s in item.query]
        pos = [_vlad_forward(s.data, codebook) for s in item.positives]
        neg = [_vlad_forward(s.data, codebook) for s in item.negatives]
        if any(c.degenerate for c in agents + pos + neg):
            skipped += 1
            item_losses.append(None)
            continue
        yq, fuse_back, fb = _fuse_forward_backward(agents, mode)
        boundary = min(boundary, fb)
        dps = np.array([_sqdist(yq, p.flat) for p in pos])
        best = int(np.argmin(dps))
        if len(dps) > 1:
            boundary = min(boundary, float(np.partition(dps, 1)[1] - dps[best]))
        dp = float(dps[best])
        dns = np.array([_sqdist(yq, n.flat) for n in neg])
        hinge = dp + margin - dns
        boundary = min(boundary, float(np.min(np.abs(hinge))))
        active = hinge > 0
        item_losses.append(float(np.sum(np.where(active, hinge, 0.0))))
        total += item_losses[-1]
        used += 1
        if not active.any():
            continue
        n_active = int(active.sum())
        yp = pos[best].flat
        g_yq = 2.0 * n_active * (yq - yp)
        g_yp = -2.0 * n_active * (yq - yp)
        g_neg = []
        for j, nc in enumerate(neg):
            if active[j]:
                g_yq -= 2.0 * (yq - nc.flat)
                g_neg.append((nc, 2.0 * (yq - nc.flat)))
        contributions = list(zip(agents, fuse_back(g_yq)))
        contributions.append((pos[best], _flat_grad_to_clusters(pos[best], g_yp)))
        contributions += [(nc, _flat_grad_to_clusters(nc, g)) for nc, g in g_neg]
        for cache, g_u in contributions:
            dc, da = _vlad_backward(cache, g_u, codebook)
            g_c += dc
            g_alpha += da
    if used == 0:
        return ForwardBackwardResult(0.0, g_c, 0.0, skipped, tuple(item_losses), boundary)
    if skipped:
        logger.warning("skipped %d batch item(s) with degenerate descriptors", skipped)
    return ForwardBackwardResult(total / used, g_c / used, g_alpha / used, skipped, tuple(item_losses), boundary)


# ---------------------------------------------------------------------------
# finite-difference verification


def central_difference(f: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for j in range(x0.size):
        x = x0.copy().reshape(-1)
        x[j] += eps
        fplus = f(x.reshape(x0.shape))
        x[j] -= 2 * eps
        fminus = f(x.reshape(x0.shape))
        flat[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    b = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


@dataclass(frozen=True)
class GradCheckReport:
    errors: dict
    step: float
    loss: float
    boundary: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def gradcheck(
    batch: TripletBatch,
    codebook: Codebook,
    fusion_mode=FusionMode.GLOBAL,
    margin: float = DEFAULT_MARGIN,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare :func:`forward_backward` against central differences of :func:`batch_loss`."""
    fb = forward_backward(batch, codebook, fusion_mode, margin)
    num_c = central_difference(
        lambda c: batch_loss(batch, codebook.with_params(centroids=c), fusion_mode, margin),
        codebook.centroids,
        eps,
    )
    num_a = central_difference(
        lambda a: batch_loss(batch, codebook.with_params(softness=float(a[0])), fusion_mode, margin),
        np.array([codebook.softness]),
        eps,
    )
    errors = {
        "centroids": relative_error(fb.grad_centroids, num_c),
        "softness": relative_error(fb.grad_softness, num_a),
    }
    return GradCheckReport(errors, eps, fb.loss, fb.boundary)


def random_gradcheck_case(
    seed: int,
    num_clusters: int = 4,
    dim: int = 8,
    num_local: int = 16,
    num_collaborators: int = 1,
    num_positives: int = 2,
    num_negatives: int = 3,
    softness: float = 2.0,
) -> tuple[TripletBatch, Codebook]:
    """Small random batch whose loss has active hinges most of the time."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(dim)
    base = rng.normal(size=(num_local, dim)) * scale

    def view(noise):
        return LocalDescriptorSet(base + noise * rng.normal(size=base.shape) * scale)

    def other():
        return LocalDescriptorSet(rng.normal(size=base.shape) * scale)

    query = [view(0.6)] + [view(0.6) for _ in range(num_collaborators)]
    positives = [view(0.8) for _ in range(num_positives)]
    negatives = [view(1.0) if j % 2 else other() for j in range(num_negatives)]
    codebook = Codebook(rng.normal(size=(num_clusters, dim)) * scale, softness)
    # margin large enough that several hinges are active
    return TripletBatch([TripletItem(query, positives, negatives)]), codebook


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    margin: float = DEFAULT_MARGIN
    seed: int = 0
    halve_every: int = 5
    batch_size: int = 16
    num_negatives: int = 10
    fusion_mode: str = "global"


@dataclass(frozen=True)
class TrainingExample:
    """A query group plus the ego pose, with the reference pool it is trained against."""

    query: tuple[LocalDescriptorSet, ...]
    ego_pose: tuple[float, float]


@dataclass(frozen=True)
class TrainingSet:
    examples: tuple[TrainingExample, ...]
    reference_sets: tuple[LocalDescriptorSet, ...]
    reference_poses: np.ndarray
    positive_radius: float

    def sample_item(self, example: TrainingExample, rng: np.random.Generator, num_negatives: int) -> TripletItem:
        ego = np.asarray(example.ego_pose)
        dist = np.hypot(*(self.reference_poses - ego).T)
        pos_idx = np.flatnonzero(dist < self.positive_radius)
        neg_idx = np.flatnonzero(dist >= self.positive_radius)
        if pos_idx.size == 0 or neg_idx.size == 0:
            raise ValueError("training example lacks positives or negatives at the configured radius")
        chosen = rng.choice(neg_idx, size=min(num_negatives, neg_idx.size), replace=False)
        return TripletItem(
            example.query,
            [self.reference_sets[i] for i in pos_idx],
            [self.reference_sets[i] for i in np.sort(chosen)],
        )


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    mean_loss: float
    lr: float


@dataclass(frozen=True)
class TrainResult:
    codebook: Codebook
    trace: tuple[TraceRow, ...] = field(default_factory=tuple)

    def trace_csv(self) -> str:
        lines = ["epoch,mean_loss,lr"]
        lines += [f"{r.epoch},{r.mean_loss!r},{r.lr!r}" for r in self.trace]
        return "\n".join(lines) + "\n"


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Base rate halved every ``halve_every`` epochs (epochs counted from 0)."""
    return config.learning_rate * 0.5 ** (epoch // config.halve_every)


def train(config: TrainConfig, data: TrainingSet, init: Codebook) -> TrainResult:
    """Mini-batch gradient descent on ``(centroids, softness)``.

    Negatives are drawn once per example, batches are reshuffled every epoch. The
    epoch loss is the exactly-rounded mean of per-item losses, so with a zero
    learning rate the trace is flat. Start from a single-agent-trained codebook
    by passing it as ``init``.
    """
    rng = np.random.default_rng(config.seed)
    items = [data.sample_item(ex, rng, config.num_negatives) for ex in data.examples]
    codebook = init
    trace = []
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = TripletBatch([items[i] for i in order[start : start + config.batch_size]])
            fb = forward_backward(batch, codebook, config.fusion_mode, config.margin)
            if not math.isfinite(fb.loss) or not np.all(np.isfinite(fb.grad_centroids)) or not math.isfinite(fb.grad_softness):
                raise TrainingDivergedError(
                    f"non-finite loss or gradient at epoch {epoch}, batch starting {start} (loss={fb.loss})"
                )
            losses += [l for l in fb.item_losses if l is not None]
            if lr > 0:
                codebook = Codebook(
                    codebook.centroids - lr * fb.grad_centroids,
                    max(codebook.softness - lr * fb.grad_softness, MIN_SOFTNESS),
                )
        mean = math.fsum(losses) / len(losses) if losses else 0.0
        trace.append(TraceRow(epoch, mean, lr))
        logger.info("epoch %d mean loss %.6f lr %.3g", epoch, mean, lr)
    return TrainResult(codebook, tuple(trace))


@dataclass(frozen=True)
class InitComparison:
    single_agent: TrainResult
    from_single: TrainResult
    fresh: TrainResult

    def summary(self) -> str:
        return (
            f"single-agent final loss {self.single_agent.trace[-1].mean_loss:.6f}; "
            f"multi-agent from single-agent init {self.from_single.trace[-1].mean_loss:.6f}; "
            f"multi-agent fresh init {self.fresh.trace[-1].mean_loss:.6f}"
        )


def compare_initialization(config: TrainConfig, data: TrainingSet, init: Codebook) -> InitComparison:
    """Train single-agent first, then the multi-agent model from it and from ``init``.

    Both multi-agent runs share the sampling seed, so they see identical batches.
    """
    single = train(replace(config, fusion_mode=FusionMode.NONE.value), data, init)
    from_single = train(config, data, single.codebook)
    fresh = train(config, data, init)
    return InitComparison(single, from_single, fresh)
