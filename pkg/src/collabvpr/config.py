"""Run configuration: JSON file, presets and ``key=value`` overrides.

Resolution order (later wins): built-in defaults, ``--preset``, the config file
(``--config`` or ``$COLLABVPR_CONFIG``), then command-line overrides. Section
keys use dots on the command line, e.g. ``scene.occlusion=0.3``.

Seed splitting: every consumer of randomness gets
``SeedSequence([seed, STREAMS[name]]).generate_state(1, uint64)[0]`` so one
64-bit master seed determines the whole run.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .aggregation import DEFAULT_NUM_CLUSTERS, DEFAULT_SOFTNESS
from .fusion import FusionMode
from .simworld import SWEEP_DISTANCES_M, ExperimentConfig, SceneConfig
from .training import TrainConfig

CONFIG_ENV = "COLLABVPR_CONFIG"

STREAMS = {"world": 0, "codebook": 1, "train": 2, "selfcheck": 3}

PRESETS = {
    # seeded occlusion benchmark used by the acceptance suite
    "occlusion": {"scene": {"latent_dim": 64, "occlusion": 0.5, "num_collaborators": 1}},
    # the toy training task: K=4, d=8, 200 places
    "toy-train": {
        "num_clusters": 4,
        "softness": 5.0,
        "scene": {"latent_dim": 8, "descriptors_per_view": 16, "viewpoint_noise": 0.8},
        "train": {"epochs": 6, "learning_rate": 0.05},
    },
}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, stream: str) -> int:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), STREAMS[stream]])
    return int(ss.generate_state(1, np.uint64)[0])


_SCENE_KEYS = {f.name for f in fields(SceneConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "fusion_mode"} | {"init_codebook"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    num_clusters: int = DEFAULT_NUM_CLUSTERS
    softness: float = DEFAULT_SOFTNESS
    kmeans_max_iter: int = 100
    aggregation: str = "soft"
    fusion: str = "global"
    k_top: int = 10
    ks: tuple = (1, 5, 10)
    threshold_m: float = 20.0
    radius_m: float | None = None
    sweep_distances: tuple = SWEEP_DISTANCES_M
    world: str | None = None
    codebook: str | None = None
    database: str | None = None
    descriptors: str | None = None
    poses: str | None = None
    output: str | None = None
    scene: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.aggregation not in ("hard", "soft"):
            raise ConfigError(f"aggregation must be 'hard' or 'soft', got {self.aggregation!r}")
        try:
            FusionMode(self.fusion)
        except ValueError:
            raise ConfigError(f"fusion must be one of {[m.value for m in FusionMode]}, got {self.fusion!r}") from None
        if self.num_clusters < 2:
            raise ConfigError("num_clusters must be at least 2")
        if self.k_top < 1 or self.threshold_m <= 0 or self.softness <= 0:
            raise ConfigError("k_top must be >= 1 and threshold_m, softness positive")
        if self.radius_m is not None and self.radius_m <= 0:
            raise ConfigError("radius_m must be positive")
        bad = set(self.scene) - _SCENE_KEYS
        if bad:
            raise ConfigError(f"unknown scene keys: {sorted(bad)}")
        bad = set(self.train) - _TRAIN_KEYS
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "sweep_distances", tuple(float(d) for d in self.sweep_distances))

    def scene_config(self) -> SceneConfig:
        params = dict(self.scene)
        if self.radius_m is not None:
            params["radius_m"] = self.radius_m
        try:
            return SceneConfig(seed=derive_seed(self.seed, "world"), **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene configuration: {exc}") from exc

    def train_config(self) -> TrainConfig:
        params = {k: v for k, v in self.train.items() if k != "init_codebook"}
        try:
            return TrainConfig(seed=derive_seed(self.seed, "train"), fusion_mode=self.fusion, **params)
        except TypeError as exc:
            raise ConfigError(f"invalid train configuration: {exc}") from exc

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(k_top=max(self.k_top, max(self.ks)), threshold_m=self.threshold_m, aggregation=self.aggregation, ks=self.ks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        d["sweep_distances"] = list(self.sweep_distances)
        return d

    def header(self) -> str:
        """One-line JSON echo of the effective configuration."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


_TOP_KEYS = {f.name for f in fields(RunConfig)}


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r} in {where}")
        if key in ("scene", "train"):
            if not isinstance(value, dict):
                raise ConfigError(f"{key!r} in {where} must be an object")
            out[key] = {**out.get(key, {}), **value}
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    """Turn ``["k=v", "scene.x=v"]`` into a nested dict; values are parsed as JSON when possible."""
    out: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        value = _parse_value(raw)
        if "." in key:
            section, sub = key.split(".", 1)
            out.setdefault(section, {})[sub] = value
        else:
            out[key] = value
    return out


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    data = RunConfig().to_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset], f"preset {preset}")
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {path}: {exc}") from exc
        try:
            file_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data = _merge(data, file_data, str(path))
    if overrides:
        data = _merge(data, overrides, "command line")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(config: RunConfig, **changes) -> RunConfig:
    return replace(config, **changes)
