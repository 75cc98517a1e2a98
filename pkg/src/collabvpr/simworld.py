"""Seeded synthetic multi-agent worlds for desk-scale collaborative place recognition.

Each place has a latent appearance: ``M`` local descriptors drawn around a shared
vocabulary of prototype directions. Reference views add a little noise; the ego
view adds viewpoint noise and has a fraction of its rows replaced by random
distractors (occlusion); collaborators observe whichever place is nearest to
their own pose, with noise growing linearly with their offset from the ego.
All local descriptors are L2-normalized rows, like CNN features fed to NetVLAD.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .aggregation import Codebook, GlobalDescriptor, LocalDescriptorSet, aggregate, fit_codebook
from .fusion import FusionMode, fuse_descriptors
from .training import TrainingExample, TrainingSet
from .retrieval import (
    DEFAULT_KS,
    OUTDOOR_THRESHOLD_M,
    EvalReport,
    ReferenceDatabase,
    build_database,
    evaluate,
    query_reordering,
    query_topk,
)

# sub-stream ids for numpy SeedSequence spawn keys; changing the collaborator
# distance leaves places, references and ego views untouched
_PLACES, _REFERENCES, _EGO, _COLLABORATORS = range(4)

EXPERIMENT_MODES = ("single", "global", "clusterwise", "average", "reordering")


@dataclass(frozen=True)
class SceneConfig:
    num_places: int = 200
    extent_m: float = 600.0
    latent_dim: int = 512
    descriptors_per_view: int = 32
    num_collaborators: int = 1
    max_distance_m: float = 5.0
    noise_per_meter: float = 0.2
    occlusion: float = 0.5
    seed: int = 7
    num_queries: int | None = None  # defaults to num_places
    num_words: int = 64
    place_jitter: float = 0.4
    reference_noise: float = 0.1
    viewpoint_noise: float = 1.6
    pose_jitter_m: float = 2.0
    radius_m: float | None = None  # communication radius, defaults to max_distance_m

    def __post_init__(self):
        for name in ("num_places", "latent_dim", "descriptors_per_view", "num_words"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.num_collaborators < 0:
            raise ValueError("num_collaborators must be non-negative")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion must lie in [0, 1]")
        if self.extent_m <= 0 or self.max_distance_m <= 0:
            raise ValueError("distances must be positive")
        if self.radius_m is not None and self.radius_m <= 0:
            raise ValueError("radius_m must be positive")
        for name in ("noise_per_meter", "place_jitter", "reference_noise", "viewpoint_noise", "pose_jitter_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_queries is not None and not 1 <= self.num_queries <= self.num_places:
            raise ValueError("num_queries must lie in [1, num_places]")

    @property
    def queries(self) -> int:
        return self.num_places if self.num_queries is None else self.num_queries

    @property
    def radius(self) -> float:
        return self.max_distance_m if self.radius_m is None else self.radius_m

    def to_dict(self) -> dict:
        return asdict(self)


# the seeded occlusion benchmark: defaults at a smaller feature width so a full
# distance sweep runs in seconds
OCCLUSION_BENCHMARK = SceneConfig(latent_dim=64)
SWEEP_DISTANCES_M = (1.0, 5.0, 8.0, 15.0)


@dataclass(frozen=True)
class AgentObservation:
    agent_id: int
    role: str  # "ego" | "collaborator"
    pose: tuple[float, float]
    descriptors: LocalDescriptorSet
    observed_place: int | None = None


@dataclass(frozen=True)
class QueryGroup:
    ego: AgentObservation
    collaborators: tuple[AgentObservation, ...] = ()
    place_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "collaborators", tuple(self.collaborators))
        if self.ego.role != "ego" or any(c.role != "collaborator" for c in self.collaborators):
            raise ValueError("a query group has exactly one ego followed by collaborators")

    @property
    def agents(self) -> tuple[AgentObservation, ...]:
        return (self.ego,) + self.collaborators


@dataclass(frozen=True)
class ReferenceView:
    place_id: int
    pose: tuple[float, float]
    descriptors: LocalDescriptorSet


@dataclass(frozen=True)
class World:
    config: SceneConfig
    references: tuple[ReferenceView, ...]
    queries: tuple[QueryGroup, ...]


def _distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def admit_collaborators(ego: AgentObservation, candidates: Iterable[AgentObservation], radius: float) -> QueryGroup:
    """Keep candidates within the closed ball of ``radius`` meters around the ego."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    admitted = [c for c in candidates if _distance(c.pose, ego.pose) <= radius]
    return QueryGroup(ego, tuple(admitted))


def _rows(latent: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    x = latent + noise * rng.normal(size=latent.shape) / math.sqrt(latent.shape[1])
    return _normalize_rows(x)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0.0, 1.0, n)


def generate_world(config: SceneConfig) -> World:
    """Deterministic for a given config; see the module docstring for the generative model."""
    seq = np.random.SeedSequence(config.seed)
    streams = {i: np.random.default_rng(s) for i, s in enumerate(seq.spawn(4))}
    d = config.latent_dim
    m = config.descriptors_per_view

    rng = streams[_PLACES]
    words = _normalize_rows(rng.normal(size=(config.num_words, d)))
    poses = rng.uniform(0.0, config.extent_m, size=(config.num_places, 2))
    latents = []
    for _ in range(config.num_places):
        which = rng.integers(config.num_words, size=m)
        latents.append(_rows(words[which], config.place_jitter, rng))
    latents = np.stack(latents)

    rng = streams[_REFERENCES]
    references = tuple(
        ReferenceView(p, (float(poses[p, 0]), float(poses[p, 1])), LocalDescriptorSet(_rows(latents[p], config.reference_noise, rng), f"ref-{p}"))
        for p in range(config.num_places)
    )

    rng_ego = streams[_EGO]
    rng_col = streams[_COLLABORATORS]
    query_places = np.sort(rng_ego.choice(config.num_places, size=config.queries, replace=False))
    n_occluded = int(round(config.occlusion * m))
    queries = []
    for q, p in enumerate(query_places):
        r = config.pose_jitter_m * math.sqrt(rng_ego.uniform())
        t = rng_ego.uniform(0.0, 2 * math.pi)
        ego_pose = (float(poses[p, 0] + r * math.cos(t)), float(poses[p, 1] + r * math.sin(t)))
        rows = _rows(latents[p], config.viewpoint_noise, rng_ego)
        if n_occluded:
            hidden = rng_ego.choice(m, size=n_occluded, replace=False)
            rows[hidden] = _normalize_rows(rng_ego.normal(size=(n_occluded, d)))
        ego = AgentObservation(0, "ego", ego_pose, LocalDescriptorSet(rows, f"q{q}-a0"), int(p))

        candidates = []
        for a in range(1, config.num_collaborators + 1):
            dist = config.max_distance_m * rng_col.uniform()
            t = rng_col.uniform(0.0, 2 * math.pi)
            pose = (ego_pose[0] + dist * math.cos(t), ego_pose[1] + dist * math.sin(t))
            seen = int(np.argmin(np.hypot(poses[:, 0] - pose[0], poses[:, 1] - pose[1])))
            noise = config.viewpoint_noise + config.noise_per_meter * dist
            candidates.append(
                AgentObservation(a, "collaborator", pose, LocalDescriptorSet(_rows(latents[seen], noise, rng_col), f"q{q}-a{a}"), seen)
            )
        group = admit_collaborators(ego, candidates, config.radius)
        queries.append(replace(group, place_id=int(p)))
    return World(config, references, tuple(queries))


def fit_world_codebook(world: World, num_clusters: int = 32, seed: int = 0, softness: float = 30.0) -> Codebook:
    return fit_codebook([r.descriptors for r in world.references], num_clusters, seed, softness)


def reference_database(world: World, codebook: Codebook, mode: str = "soft") -> ReferenceDatabase:
    return build_database((r.place_id, r.pose, aggregate(r.descriptors, codebook, mode)) for r in world.references)


def describe_queries(world: World, codebook: Codebook, mode: str = "soft") -> list[list[GlobalDescriptor]]:
    return [[aggregate(a.descriptors, codebook, mode) for a in g.agents] for g in world.queries]


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple[str, ...] = EXPERIMENT_MODES
    k_top: int = 10
    threshold_m: float = OUTDOOR_THRESHOLD_M
    aggregation: str = "soft"
    ks: tuple[int, ...] = DEFAULT_KS


@dataclass(frozen=True)
class ExperimentResult:
    reports: dict
    gains: dict = field(default_factory=dict)


def evaluate_mode(
    db: ReferenceDatabase,
    world: World,
    descriptors: Sequence[Sequence[GlobalDescriptor]],
    mode: str,
    config: ExperimentConfig,
) -> EvalReport:
    results = []
    for group, descs in zip(world.queries, descriptors):
        if mode == "reordering":
            res = query_reordering(db, descs, config.k_top)
        else:
            fusion = FusionMode.NONE if mode == "single" else FusionMode(mode)
            res = query_topk(db, fuse_descriptors(descs[0], descs[1:], fusion), config.k_top)
        results.append((group.ego.pose, res))
    return evaluate(db, results, config.threshold_m, config.ks)


def run_experiment(world: World, codebook: Codebook, config: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Evaluate every mode on the same world; gains are recall differences to single-agent."""
    db = reference_database(world, codebook, config.aggregation)
    descs = describe_queries(world, codebook, config.aggregation)
    modes = list(config.modes)
    if "single" not in modes:
        modes.insert(0, "single")
    reports = {m: evaluate_mode(db, world, descs, m, config) for m in modes}
    base = reports["single"].recall_at
    gains = {m: {k: r.recall_at[k] - base[k] for k in r.recall_at} for m, r in reports.items() if m != "single"}
    return ExperimentResult(reports, gains)


@dataclass(frozen=True)
class SweepRow:
    distance_m: float
    mode: str
    recall_at: dict
    gain_at: dict


def distance_sweep(
    scene: SceneConfig,
    distances: Sequence[float],
    codebook: Codebook,
    config: ExperimentConfig = ExperimentConfig(),
) -> list[SweepRow]:
    """One row per (distance, fused mode); the world's collaborators move out to each distance."""
    rows = []
    for dist in distances:
        world = generate_world(replace(scene, max_distance_m=float(dist), radius_m=None))
        result = run_experiment(world, codebook, config)
        for mode, report in result.reports.items():
            if mode == "single":
                continue
            rows.append(SweepRow(float(dist), mode, dict(report.recall_at), result.gains[mode]))
    return rows


def sweep_csv(rows: Sequence[SweepRow], ks: Sequence[int] = DEFAULT_KS) -> str:
    head = ["distance_m", "mode"] + [f"recall@{k}" for k in ks] + [f"gain@{k}" for k in ks]
    lines = [",".join(head)]
    for r in rows:
        vals = [f"{r.distance_m:g}", r.mode] + [f"{r.recall_at[k]:.6f}" for k in ks] + [f"{r.gain_at[k]:+.6f}" for k in ks]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def training_set(world: World, positive_radius: float = OUTDOOR_THRESHOLD_M) -> TrainingSet:

    return TrainingSet(
        tuple(TrainingExample(tuple(a.descriptors for a in g.agents), g.ego.pose) for g in world.queries),
        tuple(r.descriptors for r in world.references),
        np.array([r.pose for r in world.references]),
        positive_radius,
    )
