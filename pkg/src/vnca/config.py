"""Run configuration: dataclasses, YAML serialization, dotted overrides.

A config file fully determines a training run. The schema mirrors the
dataclasses below; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class GridConfig:
    channels: int = 12
    hidden_dim: int = 128
    fire_rate: float = 0.5
    step_size: float = 1.0
    padding: str = "replicate"
    state_clamp: float | None = 8.0  # bound on updated cell states; None disables


@dataclass
class EncodingConfig:
    density: bool = True
    velocity: bool = True


@dataclass
class RenderConfig:
    image_size: tuple[int, int] = (256, 256)
    gamma: float | None = None  # None: scale with volume depth, 0.05 at D=64
    exposure: float = 1.0
    azimuths_deg: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)
    elevation_deg: float = 0.0
    multiview: bool = True


@dataclass
class ExtractorConfig:
    kind: str = "random"  # random | vgg16
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 48, 64, 64)
    input_size: int = 128
    weights: str | None = None  # vgg16 only: state-dict path or "download"

    def spec(self) -> dict:
        if self.kind == "random":
            return {"kind": "random", "seed": self.seed, "widths": tuple(self.widths),
                    "input_size": self.input_size}
        if self.kind == "vgg16":
            return {"kind": "vgg16", "weights": self.weights, "input_size": self.input_size}
        raise ValueError(f"unknown extractor kind {self.kind!r}")


@dataclass
class FlowConfig:
    kind: str = "lucas_kanade"  # lucas_kanade | torchscript
    window: int = 7
    sigma: float = 1.5
    path: str | None = None  # torchscript only

    def spec(self) -> dict:
        if self.kind == "lucas_kanade":
            return {"kind": "lucas_kanade", "window": self.window, "sigma": self.sigma}
        if self.kind == "torchscript":
            return {"kind": "torchscript", "path": self.path}
        raise ValueError(f"unknown flow kind {self.kind!r}")


@dataclass
class LossConfig:
    lambda_app: float = 1.0
    lambda_motion: float = 0.5
    lambda_dir: float = 1.0
    lambda_mag: float = 1.0
    invert_motion_gate: bool = False
    style_max_positions: int = 1024
    flow_input: str = "gray"  # gray | color renders fed to the flow estimator
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)


@dataclass
class DataConfig:
    density_dir: str | None = None
    velocity_dir: str | None = None
    frame_index: int = 0
    style_image: str | None = None
    style_size: int = 256


@dataclass
class TrainConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    epochs: int = 1000
    lr: float = 1e-3
    lr_decay: float = 0.3
    lr_milestones: tuple[float, float] = (0.6, 0.85)  # fractions of epochs
    n_range: tuple[int, int] = (32, 64)
    steps_per_frame: int = 24
    pool_size: int = 32
    reseed_prob: float = 0.1
    seed: int = 0
    checkpoint_every: int = 250
    out_dir: str = "runs/latest"
    device: str = "cpu"

    def validate(self) -> None:
        if self.n_range[0] < 1 or self.n_range[1] < self.n_range[0]:
            raise ValueError(f"n_range must satisfy 1 <= lo <= hi, got {self.n_range}")
        if self.steps_per_frame < 1:
            raise ValueError(f"steps_per_frame must be >= 1, got {self.steps_per_frame}")
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if not 0.0 <= self.reseed_prob <= 1.0:
            raise ValueError(f"reseed_prob must be in [0, 1], got {self.reseed_prob}")
        if self.grid.padding not in ("replicate", "circular"):
            raise ValueError(f"padding must be replicate or circular, got {self.grid.padding!r}")
        self.loss.extractor.spec()
        self.loss.flow.spec()
        if self.loss.flow_input not in ("gray", "color"):
            raise ValueError(f"flow_input must be gray or color, got {self.loss.flow_input!r}")


def _from_mapping(cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_nested_type(cls, name)):
            if not isinstance(value, dict):
                raise ValueError(f"{cls.__name__}.{name} must be a mapping")
            kwargs[name] = _from_mapping(_nested_type(cls, name), value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
        del ftype
    return cls(**kwargs)


def _nested_type(cls, name: str):
    default = getattr(cls(), name)
    return type(default)


def config_from_dict(data: dict) -> TrainConfig:
    cfg = _from_mapping(TrainConfig, data or {})
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def load_config(path: str | Path) -> TrainConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    return config_from_dict(data)


def save_config(path: str | Path, cfg: TrainConfig) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)
    return path


def apply_override(data: dict, assignment: str) -> dict:
    """Apply one 'dotted.key=value' override to a config mapping in place."""
    if "=" not in assignment:
        raise ValueError(f"override must look like key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into non-mapping at {key!r} in {dotted!r}")
    node[keys[-1]] = yaml.safe_load(raw)
    return data
