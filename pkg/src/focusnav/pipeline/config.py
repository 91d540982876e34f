"""Run configuration: every hyperparameter in one JSON-serialisable tree."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..attention_policy import VARIANTS, LossWeights, NetConfig
from ..geometry import RigidTransform, rot_x
from ..perception import GridSpec
from ..sensors import DepthCamera, LidarModel, SensorSuite, camera_mount
from ..world import WalkerParams, WorldConfig
from .rollout import EpisodeParams

SCHEMA_VERSION = 1

SCENARIOS = ("flat-static", "flat-dynamic", "unstructured-static", "unstructured-dynamic")


class ConfigError(ValueError):
    pass


@dataclass
class SensorConfig:
    lidar_azimuth: int = 360
    lidar_elevations: int = 16
    lidar_elevation_range: tuple[float, float] = (-7.0, 52.0)
    lidar_range: float = 10.0
    lidar_height: float = 1.2
    lidar_voxel: float = 0.1
    camera_width: int = 64
    camera_height: int = 48
    camera_hfov: float = 87.0
    camera_pitch: float = 35.0
    camera_mount_height: float = 1.0
    camera_range: float = 8.0
    range_noise: float = 0.0

    def build(self) -> SensorSuite:
        lidar = LidarModel(RigidTransform(rot_x(math.pi), [0.1, 0.0, self.lidar_height]), self.lidar_azimuth,
                           tuple(self.lidar_elevation_range), self.lidar_elevations, self.lidar_range, self.range_noise)
        cam = DepthCamera(self.camera_width, self.camera_height, self.camera_hfov,
                          camera_mount(self.camera_mount_height, 0.15, self.camera_pitch), self.camera_range)
        return SensorSuite(lidar, cam, self.lidar_voxel)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_windows: int = 2
    window: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    fast_conv: bool = True


@dataclass
class ScenarioConfig:
    flat_families: tuple[str, ...] = ("flat",)
    unstructured_families: tuple[str, ...] = ("stairs", "slope", "gap", "flat")
    pillar_density: float = 0.08
    dynamic_count: int = 3

    def world(self, base: WorldConfig, scenario: str, seed: int) -> WorldConfig:
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}")
        terrain, motion = scenario.split("-")
        fams = self.flat_families if terrain == "flat" else self.unstructured_families
        return dataclasses.replace(base, families=tuple(fams), pillar_density=self.pillar_density,
                                   dynamic_count=self.dynamic_count if motion == "dynamic" else 0, seed=seed)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    episode: EpisodeParams = field(default_factory=EpisodeParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    collect_episodes: int = 200
    collect_scenarios: tuple[str, ...] = SCENARIOS
    # correlated perturbation of executed expert actions (vx, vy, yaw rate); labels stay clean
    collect_noise: tuple[float, float, float] = (0.2, 0.1, 0.6)
    collect_noise_corr: float = 0.8
    eval_episodes: int = 50
    eval_seeds: int = 3
    eval_scenarios: tuple[str, ...] = SCENARIOS
    gamma: float = 0.99

    # -- presets ----------------------------------------------------------------
    @classmethod
    def toy(cls, seed: int = 0) -> "RunConfig":
        """Desk-scale preset: coarser BEV, narrower networks, sparser sensors."""
        grid = GridSpec(depth=4, size=32, cell=0.2, z_cell=0.5, z_min=-1.0, max_points=16)
        net = NetConfig(grid=grid, vfe_hidden=8, vfe_channels=4, bev_channels=16, dim=32, heads=4,
                        enc_layers=1, dec_layers=1, n_waypoints=5, patch=4, gate_hidden=32, gru_hidden=64)
        sensors = SensorConfig(lidar_azimuth=120, lidar_elevations=8, camera_width=32, camera_height=24)
        return cls(seed=seed, net=net, sensors=sensors)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema version {self.schema_version} != {SCHEMA_VERSION}")
        self.world.validate()
        self.net.validate()
        for s in tuple(self.collect_scenarios) + tuple(self.eval_scenarios):
            if s not in SCENARIOS:
                raise ConfigError(f"unknown scenario {s!r}")
        if self.train.window < 1 or self.train.batch_windows < 1:
            raise ConfigError("window and batch size must be positive")
        if self.net.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.net.variant!r}")
        if len(self.collect_noise) != 3 or min(self.collect_noise) < 0 or not 0 <= self.collect_noise_corr < 1:
            raise ConfigError("collect noise needs three non-negative scales and a correlation in [0, 1)")
        if not 0 < self.episode.dt <= 0.1:
            raise ConfigError("episode dt must lie in (0, 0.1]")

    def with_variant(self, variant: str) -> "RunConfig":
        cfg = copy.deepcopy(self)
        cfg.net.variant = variant
        return cfg

    # -- serialisation ------------------------------------------------------------
    def to_dict(self) -> dict:
        return _to_jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        base = cls.toy() if d.pop("preset", None) == "toy" else cls()
        return _merge(base, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        cfg.validate()
        return cfg

    def data_hash(self) -> str:
        """Hash of the fields that shape collected demonstrations."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("world", "scenarios", "sensors", "episode", "collect_scenarios",
                                      "collect_noise", "collect_noise_corr", "seed")}
        keep["grid"] = d["net"]["grid"]
        keep["n_waypoints"] = d["net"]["n_waypoints"]
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]

    def model_hash(self) -> str:
        """Hash of the fields that define the network's parameter layout."""
        return hashlib.sha256(json.dumps(self.to_dict()["net"], sort_keys=True).encode()).hexdigest()[:16]


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, RigidTransform):
        return {"rotation": x.rotation.tolist(), "translation": x.translation.tolist()}
    return x


def _merge(obj, d: dict):
    """Overlay a (possibly partial) dict onto a dataclass instance, recursively."""
    if not dataclasses.is_dataclass(obj):
        return d
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in d.items():
        if k not in fields:
            raise ConfigError(f"unknown config key {k!r} for {type(obj).__name__}")
        cur = getattr(obj, k)
        if dataclasses.is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {k!r} expects an object")
            changes[k] = _merge(cur, v)
        elif isinstance(cur, tuple):
            changes[k] = tuple(v)
        else:
            changes[k] = v
    return dataclasses.replace(obj, **changes)


def derive_seed(*keys: int) -> int:
    """Per-episode 63-bit seed from a splittable counter."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))
