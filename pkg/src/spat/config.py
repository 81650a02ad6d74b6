"""Declarative experiment configuration: YAML file plus flag overrides.

The on-disk config is the single source of truth for a run; every run
directory gets an exact snapshot of the config that produced it, and
``parse(serialize(cfg)) == cfg`` holds for any valid config.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import SyntheticSpec, WindowSpec
from .errors import ConfigError
from .model import ModelConfig


def _as_float(name: str, value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {value!r}") from None


@dataclass
class ArchitectureConfig:
    """Model architecture; lookback/horizon/channels come from the data."""

    mode: str = "temporal_tokens"
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    layers: int = 3
    patch_len: int = 16
    patch_stride: int = 8
    end_padding: bool = True
    dropout: float = 0.2
    activation: str = "gelu"
    norm_placement: str = "pre"
    instance_norm: bool = True

    def to_model_config(self, lookback: int, horizon: int, channels: int) -> ModelConfig:
        return ModelConfig(lookback=lookback, horizon=horizon, channels=channels,
                           **asdict(self))


@dataclass
class DataConfig:
    source: str = "synthetic"            # synthetic | csv
    path: str | None = None
    name: str | None = None
    date_column: bool = True
    split_ratios: tuple | None = (0.7, 0.1, 0.2)
    split_counts: tuple | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', "
                              f"got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("data.path is required when data.source is 'csv'")
        if self.split_ratios is not None and self.split_counts is not None:
            raise ConfigError("give data.split_ratios or data.split_counts, not both")
        if self.split_ratios is None and self.split_counts is None:
            raise ConfigError("one of data.split_ratios / data.split_counts required")
        if self.split_ratios is not None:
            self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.split_counts is not None:
            self.split_counts = tuple(int(c) for c in self.split_counts)

    def dataset_name(self) -> str:
        if self.name:
            return self.name
        if self.source == "csv":
            return Path(self.path).stem
        return "synthetic"


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 10
    finetune_epochs: int | None = None   # default: half the pretrain budget
    finetune_lr: float | None = None     # default: reuse lr
    patience: int | None = 5             # None disables early stopping
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.lr = _as_float("optimizer.lr", self.lr)
        self.lr_min = _as_float("optimizer.lr_min", self.lr_min)
        if self.finetune_lr is not None:
            self.finetune_lr = _as_float("optimizer.finetune_lr", self.finetune_lr)
        if self.lr <= 0.0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError("optimizer.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("optimizer.batch_size must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("optimizer.patience must be >= 1 or null")


@dataclass
class PruningConfig:
    alpha: float = 0.3
    score_batches: int | None = None     # None = one full training epoch
    rescore_between_removals: bool = False

    def __post_init__(self):
        self.alpha = _as_float("pruning.alpha", self.alpha)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"pruning.alpha must lie in (0, 1), got {self.alpha}")
        if self.score_batches is not None and self.score_batches < 1:
            raise ConfigError("pruning.score_batches must be >= 1 or null")


@dataclass
class ExperimentConfig:
    seed: int = 0
    run_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowSpec = field(default_factory=lambda: WindowSpec(96, 24))
    model: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)


_SECTIONS = {
    "data": DataConfig,
    "window": WindowSpec,
    "model": ArchitectureConfig,
    "optimizer": OptimizerConfig,
    "pruning": PruningConfig,
}
_NESTED = {"synthetic": SyntheticSpec}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[key], value, f"{path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key in ("seed", "run_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(f"{key}: unknown config section")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(x):
        if isinstance(x, tuple):
            return [clean(v) for v in x]
        if isinstance(x, list):
            return [clean(v) for v in x]
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        return x

    return clean(asdict(cfg))


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    if data is None:
        data = {}
    return config_from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted ``section.field=value`` overrides; flags win over file."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a section")
        node[parts[-1]] = value
    return data


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    data = yaml.safe_load(path.read_text())
    if data is None:
        data = {}
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)
