"""Multi-agent descriptor fusion.

The ego descriptor is nudged toward each collaborator by an amount set by their
clamped cosine similarity, scaled by ``1/N`` so a crowd of collaborators cannot
outvote the ego view. Identical inputs reproduce the single-agent descriptor and
the collaborator order does not matter.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .aggregation import DimensionMismatchError, GlobalDescriptor, l2_normalize

Normalizer = Callable[[np.ndarray], "tuple[np.ndarray, bool]"]


class FusionMode(str, Enum):
    GLOBAL = "global"
    CLUSTERWISE = "clusterwise"
    AVERAGE = "average"
    NONE = "none"


class DegenerateEgoError(ValueError):
    pass


@dataclass(frozen=True)
class FusionInput:
    ego: GlobalDescriptor
    collaborators: tuple[GlobalDescriptor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "collaborators", tuple(self.collaborators))
        shape = self.ego.clusters.shape
        for c in self.collaborators:
            if c.clusters.shape != shape:
                raise DimensionMismatchError(
                    f"collaborator descriptor shape {c.clusters.shape} does not match ego {shape}"
                )

    @property
    def num_collaborators(self) -> int:
        return len(self.collaborators)


@dataclass(frozen=True)
class FusionReport:
    fused: GlobalDescriptor
    # (N,) for global fusion, (N, K) for cluster-wise fusion
    gammas: np.ndarray


def _require_ego(inp: FusionInput) -> None:
    if inp.ego.degenerate:
        raise DegenerateEgoError("degenerate ego descriptor")


def fuse_global(inp: FusionInput, *, normalize: Normalizer = l2_normalize) -> FusionReport:
    """``sigma(Y_0 + 1/N * sum_n max(Y_0.Y_n, 0) Y_n)`` on the flat descriptors.

    ``normalize`` exists as a debugging hook for the self-check negative control.
    """
    _require_ego(inp)
    y0 = inp.ego.flat
    n = inp.num_collaborators
    if n == 0:
        return FusionReport(inp.ego, np.zeros(0))
    gammas = np.zeros(n)
    acc = np.zeros_like(y0)
    for i, collab in enumerate(inp.collaborators):
        if collab.degenerate:
            continue
        gammas[i] = max(float(np.dot(y0, collab.flat)), 0.0)
        acc += gammas[i] * collab.flat
    fused, _ = normalize(y0 + acc / n)
    return FusionReport(GlobalDescriptor.from_flat(fused, inp.ego.num_clusters, renormalize=False), gammas)


def fuse_clusterwise(inp: FusionInput, *, normalize: Normalizer = l2_normalize) -> FusionReport:
    """Apply the similarity-regularized update separately to each intra-normalized cluster."""
    _require_ego(inp)
    n = inp.num_collaborators
    ego = inp.ego.clusters
    if n == 0:
        return FusionReport(inp.ego, np.zeros((0, ego.shape[0])))
    gammas = np.zeros((n, ego.shape[0]))
    acc = np.zeros_like(ego)
    for i, collab in enumerate(inp.collaborators):
        if collab.degenerate:
            continue
        g = np.maximum(np.einsum("kd,kd->k", ego, collab.clusters), 0.0)
        gammas[i] = g
        acc += g[:, None] * collab.clusters
    z = ego + acc / n
    blocks = np.stack([normalize(zk)[0] for zk in z])
    flat, _ = normalize(blocks.reshape(-1))
    return FusionReport(GlobalDescriptor.from_flat(flat, ego.shape[0], renormalize=False), gammas)


def fuse_average(inp: FusionInput, *, normalize: Normalizer = l2_normalize) -> GlobalDescriptor:
    """Baseline: renormalized mean of all N+1 flat descriptors (check ``.degenerate``)."""
    _require_ego(inp)
    stack = np.stack([inp.ego.flat] + [c.flat for c in inp.collaborators])
    mean, _ = normalize(stack.mean(axis=0))
    return GlobalDescriptor.from_flat(mean, inp.ego.num_clusters, renormalize=False)


def fuse(inp: FusionInput, mode: FusionMode | str) -> GlobalDescriptor:
    mode = FusionMode(mode)
    if mode is FusionMode.GLOBAL:
        return fuse_global(inp).fused
    if mode is FusionMode.CLUSTERWISE:
        return fuse_clusterwise(inp).fused
    if mode is FusionMode.AVERAGE:
        return fuse_average(inp)
    _require_ego(inp)
    return inp.ego


def fuse_descriptors(
    ego: GlobalDescriptor, collaborators: Sequence[GlobalDescriptor], mode: FusionMode | str
) -> GlobalDescriptor:
    return fuse(FusionInput(ego, tuple(collaborators)), mode)
