"""Collaborative visual place recognition: VLAD aggregation, multi-agent fusion and retrieval."""

from .aggregation import (
    Codebook,
    GlobalDescriptor,
    LocalDescriptorSet,
    aggregate,
    fit_codebook,
    hard_assign,
    soft_assign,
)
from .fusion import FusionInput, FusionMode, FusionReport, fuse_average, fuse_clusterwise, fuse_global
from .retrieval import EvalReport, ReferenceDatabase, build_database, evaluate, query_reordering, query_topk

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "EvalReport",
    "FusionInput",
    "FusionMode",
    "FusionReport",
    "GlobalDescriptor",
    "LocalDescriptorSet",
    "ReferenceDatabase",
    "aggregate",
    "build_database",
    "evaluate",
    "fit_codebook",
    "fuse_average",
    "fuse_clusterwise",
    "fuse_global",
    "hard_assign",
    "query_reordering",
    "query_topk",
    "soft_assign",
]
