"""Run configuration: YAML file -> :class:`RunConfig`."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .mesh import Circle, DomainSpec, Rectangle


class ConfigError(ValueError):
    pass


@dataclass
class DomainConfig:
    bounds: list = field(default_factory=lambda: [-1.0, 1.0, -1.0, 1.0])
    # rods as [cx, cy, r]; centred between sensor rows/columns of the default grid
    holes: list = field(default_factory=lambda: [[0.3, -0.4, 0.09], [0.3, 0.4, 0.09], [0.7, 0.0, 0.09]])
    source_region: list = field(default_factory=lambda: [-1.0, -0.5, -1.0, 1.0])
    sensor_grid: dict = field(default_factory=lambda: {"x": [-0.3, 0.9, 10], "y": [-0.9, 0.9, 10]})
    sensors: list | None = None
    mesh_size: float = 1.0 / 12.0

    def sensor_points(self) -> np.ndarray:
        if self.sensors is not None:
            return np.asarray(self.sensors, dtype=float).reshape(-1, 2)
        gx, gy = self.sensor_grid["x"], self.sensor_grid["y"]
        xs = np.linspace(gx[0], gx[1], int(gx[2]))
        ys = np.linspace(gy[0], gy[1], int(gy[2]))
        return np.array([(x, y) for y in ys for x in xs])

    def spec(self) -> DomainSpec:
        return DomainSpec(
            bounds=Rectangle(*map(float, self.bounds)),
            holes=[Circle((float(cx), float(cy)), float(r)) for cx, cy, r in self.holes],
            source_region=Rectangle(*map(float, self.source_region)),
            sensors=self.sensor_points(),
            mesh_size=float(self.mesh_size),
        )


@dataclass
class FemConfig:
    T: float = 1.0
    dt: float = 1e-2
    quadrature: str = "centroid"


@dataclass
class PriorConfig:
    alpha: float = 0.25
    robin_divisor: float = 1.42
    dense_limit: int = 4000


@dataclass
class NoiseConfig:
    samples: int = 1000
    level: float = 0.01


@dataclass
class LowRankConfig:
    ratio_threshold: float = 1e-12
    cap: int = 50
    oversample: int = 10
    power_iters: int = 2
    block: int = 10


@dataclass
class ContinuationConfig:
    delta: float = 0.2
    p_min: float = 1e-3
    binariness_tol: float = 1e-3
    tol_class: float = 1e-3
    grad_tol: float = 1e-9
    max_iter: int = 500
    relaxed_max_iter: int = 5000


@dataclass
class SweepConfig:
    m0_max: int = 36
    random_count: int = 200
    jobs: int = 1
    include_constant: bool = True


@dataclass
class ReconstructConfig:
    m0: int | None = None
    noise_seeds: int = 10
    random_per_seed: int = 10
    method: str = "dense"


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "out"
    cache: bool = True
    domain: DomainConfig = field(default_factory=DomainConfig)
    fem: FemConfig = field(default_factory=FemConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    lowrank: LowRankConfig = field(default_factory=LowRankConfig)
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)

    def validate(self) -> None:
        m = len(self.domain.sensor_points())
        if not 1 <= self.sweep.m0_max <= m:
            raise ConfigError(f"sweep.m0_max={self.sweep.m0_max} must lie in [1, {m}]")
        if self.fem.dt <= 0 or self.fem.T <= 0:
            raise ConfigError("fem.T and fem.dt must be positive")
        if not 0 < self.lowrank.ratio_threshold < 1:
            raise ConfigError("lowrank.ratio_threshold must lie in (0, 1)")
        if self.lowrank.oversample < 2:
            raise ConfigError("lowrank.oversample must be >= 2")
        if not 0 < self.continuation.delta < 1:
            raise ConfigError("continuation.delta must lie in (0, 1)")
        if self.noise.samples < 2 or self.noise.level <= 0:
            raise ConfigError("noise.samples must be >= 2 and noise.level > 0")
        if self.prior.alpha < 0:
            raise ConfigError("prior.alpha must be non-negative")
        if self.reconstruct.random_per_seed < 1:
            raise ConfigError("reconstruct.random_per_seed must be positive")
        if self.reconstruct.method not in ("dense", "cg"):
            raise ConfigError("reconstruct.method must be 'dense' or 'cg'")
        if self.sweep.random_count < 1:
            raise ConfigError("sweep.random_count must be positive")

    def factor_hash(self) -> str:
        """Hash of everything the low-rank factor depends on."""
        keys = ("seed", "domain", "fem", "prior", "noise", "lowrank")
        d = {k: v for k, v in asdict(self).items() if k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _merge(obj, data: dict, where: str):
    names = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown key {where}{key}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, _coerce(current, value, f"{where}{key}"))
    return obj


def _coerce(current, value, where):
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, float):
            return float(value)
        if isinstance(current, int) and value is not None:
            return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {where}: {value!r}") from exc
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _merge(cfg, data, "")
    if overrides:
        _merge(cfg, overrides, "")
    cfg.validate()
    return cfg
