"""Run configuration: one YAML file, strict schema, flags override file values."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .codec import EVAL_QPS
from .resample import EVAL_SCALES, format_scale, parse_scale


class ConfigError(ValueError):
    pass


@dataclass
class SourceConfig:
    path: str
    width: Optional[int] = None
    height: Optional[int] = None
    layout: str = "420"
    frames: Optional[int] = None
    name: Optional[str] = None
    dataset: str = "default"

    @property
    def label(self) -> str:
        return self.name or Path(self.path).stem


@dataclass
class DatasetConfig:
    sources: List[SourceConfig] = field(default_factory=list)
    patch: int = 64
    stride: int = 64
    holdout_fraction: float = 0.25


@dataclass
class CodecSection:
    backend: str = "toy"
    encoder: str = "x264"
    decoder: str = "ffmpeg"
    preset: str = "medium"
    extra_flags: List[str] = field(default_factory=list)
    keyint: Optional[int] = None
    threads: int = 1
    fps: int = 30
    tmp_dir: Optional[str] = None


@dataclass
class TrainSection:
    strategies: List[str] = field(default_factory=lambda: ["scaled-d"])
    scales: List[str] = field(default_factory=lambda: ["1/2"])
    qps: List[int] = field(default_factory=lambda: [32])
    lambdas: List[float] = field(default_factory=lambda: [0.01])
    epochs: int = 100
    steps: Optional[int] = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    hidden_channels: int = 32
    slope: float = 0.1
    sigma_scope: str = "per-sample"
    sigma_floor: float = 1e-6
    tau: float = 0.02
    eval_every: int = 0


@dataclass
class SweepSection:
    sequences: List[SourceConfig] = field(default_factory=list)
    filters: List[str] = field(default_factory=lambda: ["lanczos"])
    learned_strategies: List[str] = field(default_factory=lambda: ["scaled-d"])
    scales: List[str] = field(default_factory=lambda: [format_scale(s) for s in EVAL_SCALES])
    qps: List[int] = field(default_factory=lambda: list(EVAL_QPS))


@dataclass
class ReportSection:
    reference: str = "lanczos"
    metrics: List[str] = field(default_factory=lambda: ["psnr_y", "psnr_weighted", "ssim_y"])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    jobs: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: Optional[CodecSection] = None
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    report: ReportSection = field(default_factory=ReportSection)


FILTERS = ("lanczos", "bicubic", "bilinear", "learned")


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(inner, value, where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: Dict[str, Any], where: str = "config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(cfg) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def validate(cfg: RunConfig) -> RunConfig:
    from .train import STRATEGIES

    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    for s in cfg.train.strategies + cfg.sweep.learned_strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; expected one of {', '.join(STRATEGIES)}")
    for s in cfg.train.scales + cfg.sweep.scales:
        try:
            parse_scale(s)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad scale ratio {s!r}") from exc
    for q in cfg.train.qps + cfg.sweep.qps:
        if not 0 <= q <= 51:
            raise ConfigError(f"qp {q} outside [0, 51]")
    for f in cfg.sweep.filters:
        if f not in FILTERS:
            raise ConfigError(f"unknown filter {f!r}; expected one of {', '.join(FILTERS)}")
    if cfg.codec is not None and cfg.codec.backend not in ("toy", "external"):
        raise ConfigError(f"unknown codec backend {cfg.codec.backend!r}")
    if cfg.train.sigma_scope not in ("per-sample", "per-channel"):
        raise ConfigError(f"unknown sigma scope {cfg.train.sigma_scope!r}")
    for lam in cfg.train.lambdas:
        if lam < 0:
            raise ConfigError("lambdas must be non-negative")
    if not 0 <= cfg.dataset.holdout_fraction < 1:
        raise ConfigError("holdout_fraction must lie in [0, 1)")
    return cfg


def check_paths(sources: List[SourceConfig], what: str) -> None:
    for src in sources:
        if not Path(src.path).is_file():
            raise ConfigError(f"{what}: no such file {src.path}")


def load_config(path: Optional[str], base_dir: Optional[Path] = None) -> RunConfig:
    """Parse and validate a YAML run config. Relative source paths resolve against the file's directory."""
    if path is None:
        return validate(RunConfig())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = from_dict(RunConfig, data)
    root = base_dir or p.parent
    for src in cfg.dataset.sources + cfg.sweep.sequences:
        if not Path(src.path).is_absolute():
            src.path = str((root / src.path).resolve())
    return validate(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
