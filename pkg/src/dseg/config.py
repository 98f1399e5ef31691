"""Pipeline configuration: nested dataclasses parsed strictly from TOML."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from ._toml import load_toml, loads_toml


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    root_seed: int = 0
    out_dir: str = "dseg_out"
    manifest: str = ""  # empty: <out_dir>/manifest.toml


@dataclass
class SynthConfig:
    n_frames: int = 20
    n_objects: int = 8
    width: int = 192
    height: int = 128
    lidar_height: float = 1.8
    camera_height: float = 1.6
    beams: int = 32
    azimuth_steps: int = 360
    min_elevation: float = math.radians(-25.0)
    max_elevation: float = math.radians(5.0)
    noise_sigma: float = 8.0


@dataclass
class RangesegConfig:
    ground_angle_threshold: float = math.radians(5.0)
    max_height_step: float = 0.3
    theta: float = math.radians(10.0)
    min_segment_size: int = 20


@dataclass
class ProjectionConfig:
    max_radius: float = 8.0
    project_invalid: bool = True
    ignore_competes: bool = True
    invalid_range: float = 1000.0


@dataclass
class ClusterConfig:
    k: int = 30
    max_iter: int = 300
    tol: float = 1e-6
    min_segment_pixels: int = 9
    cluster_ground: bool = True
    color_weight: float = 2.0
    occupancy_weight: float = 0.125
    shape_weight: float = 0.5
    external_features: str = ""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch: int = 32
    epochs: int = 50
    pixels_per_frame: int = 2048  # 0: every pixel
    hidden: int = 32
    optimizer: str = "adam"
    power: float = 0.9
    augment: bool = False
    crop_size: int = 512


@dataclass
class RefineConfig:
    include_ground: bool = True


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    rangeseg: RangesegConfig = field(default_factory=RangesegConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def validate(self) -> "PipelineConfig":
        if self.cluster.k < 1:
            raise ConfigError("cluster.k must be at least 1")
        if self.synth.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be non-negative")
        if self.synth.n_frames < 0:
            raise ConfigError("synth.n_frames must be non-negative")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {self.train.optimizer!r}")
        if self.train.batch < 1 or self.train.epochs < 0 or self.train.pixels_per_frame < 0:
            raise ConfigError("train.batch must be >= 1; epochs and pixels_per_frame >= 0")
        if self.projection.max_radius < 0:
            raise ConfigError("projection.max_radius must be non-negative")
        if self.rangeseg.min_segment_size < 1:
            raise ConfigError("rangeseg.min_segment_size must be at least 1")
        return self

    def manifest_path(self) -> Path:
        return Path(self.run.manifest) if self.run.manifest else Path(self.run.out_dir) / "manifest.toml"


def _coerce(section: str, f: dataclasses.Field, value):
    kind = type(f.default)
    name = f"{section}.{f.name}"
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string")
        return value
    raise ConfigError(f"unsupported field type for {name}")


def config_from_dict(doc: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    sections = {f.name: f for f in fields(PipelineConfig)}
    for sname, body in doc.items():
        if sname not in sections:
            raise ConfigError(f"unknown config section [{sname}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sname}] must be a table")
        target = getattr(cfg, sname)
        known = {f.name: f for f in fields(target)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key {sname}.{key}")
            setattr(target, key, _coerce(sname, known[key], value))
    return cfg.validate()


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(text: str) -> PipelineConfig:
    try:
        doc = loads_toml(text)
    except Exception as exc:  # tomli raises its own decode error type
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(doc)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().validate()
    try:
        doc = load_toml(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except Exception as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(doc)


def dump_config(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
