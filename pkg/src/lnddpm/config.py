"""Run configuration: nested dataclasses loaded from / dumped to YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .conditions import TransformParams
from .denoiser import DenoiserConfig
from .diffusion import TrainOptions
from .errors import ConfigError
from .schedule import NoiseSchedule, make_cosine_schedule


@dataclass
class ScheduleConfig:
    T: int = 300
    s: float = 0.008
    sigma_mode: str = "posterior"

    def build(self) -> NoiseSchedule:
        return make_cosine_schedule(self.T, self.s, self.sigma_mode)


@dataclass
class DataConfig:
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    window: tuple = (-120.0, 240.0)
    roi_expansion_train_mm: float = 100.0
    roi_expansion_test_mm: float = 50.0
    air_threshold: float = -500.0
    abdomen_labels: list = field(default_factory=lambda: list(range(1, 13)))

    @property
    def anatomy_channels(self) -> int:
        return len(self.abdomen_labels) + 2


@dataclass
class SamplingConfig:
    use_ema: bool = True
    # clip the implied x0 to [-1, 1] at every reverse step
    clip_denoised: bool = True


@dataclass
class SegConfig:
    patch_shape: tuple = (32, 32, 32)
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2, 4)
    iterations: int = 1000
    lr: float = 1e-3
    batch_size: int = 2
    checkpoint_every: int = 500
    seed: int = 0
    window_overlap: float = 0.5
    threshold: float = 0.5
    node_patch_fraction: float = 0.67


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    transform: TransformParams = field(default_factory=TransformParams)
    seg: SegConfig = field(default_factory=SegConfig)

    def validate(self) -> "RunConfig":
        if self.denoiser.anatomy_channels != self.data.anatomy_channels:
            raise ConfigError(
                f"denoiser.anatomy_channels={self.denoiser.anatomy_channels} but data.abdomen_labels "
                f"gives {len(self.data.abdomen_labels)} organs + air + body = {self.data.anatomy_channels}")
        lo, hi = self.data.window
        if not lo < hi:
            raise ConfigError(f"data.window must satisfy lo < hi, got {self.data.window}")
        try:
            self.schedule.build()
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _SECTIONS.get(k) if cls is RunConfig else None
        kwargs[k] = _build(sub, v, f"{where}.{k}") if sub else (tuple(v) if isinstance(v, list) and k != "abdomen_labels" else v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {"schedule": ScheduleConfig, "denoiser": DenoiserConfig, "train": TrainOptions,
             "sampling": SamplingConfig, "data": DataConfig, "transform": TransformParams, "seg": SegConfig}


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "config").validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
