"""Pipeline configuration loaded from a YAML key/value file."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .pruning import PruneParams
from .quantizer import max_level
from .regularizers import RegularizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None  # None: the bundled digits corpus, written into the output dir
    format: str = "csv"
    fractions: tuple = (0.7, 0.1, 0.2)
    num_classes: int = 10
    labels_path: str | None = None


@dataclass
class TrainConfig:
    epochs_initial: int = 20
    epochs_regularized: int = 20
    epochs_finetune: int = 10
    learning_rate: float = 0.05
    lr_decay: float = 0.93
    batch_size: int = 32
    finetune_learning_rate: float | None = 0.01  # None: same as learning_rate


@dataclass
class QuantConfig:
    bits: int = 4
    clamp_levels: int | None = None
    aging_aware: bool = False
    levels_reserved: int = 4

    def clamp(self) -> int | None:
        if self.clamp_levels is not None:
            return self.clamp_levels
        if self.aging_aware:
            return max_level(self.bits) - self.levels_reserved
        return None


@dataclass
class PruneConfig(PruneParams):
    enabled: bool = True
    use_global: bool = False


@dataclass
class FaultConfig:
    stuck_off: float = 0.0
    drift: float = 0.0
    drift_fraction: float = 0.3
    aging_fraction: float = 0.0
    aging_levels: int = 4
    sweep_aging_fraction: float = 0.3  # cell fraction aged along the sweep's aging axis
    repetitions: int = 5
    grids: dict = field(default_factory=lambda: {
        "bits": [2, 3, 4, 6, 8],
        "drift_r": [0.0, 0.5, 1.0, 1.5, 2.0],
        "stuck_fraction": [0.0, 0.05, 0.1, 0.2, 0.3],
        "aging": [0, 2, 4, 8, 12],
    })

    def __post_init__(self):
        for k in ("stuck_off", "drift_fraction", "aging_fraction", "sweep_aging_fraction"):
            if not 0 <= getattr(self, k) <= 1:
                raise ValueError(f"faults.{k} must lie in [0, 1]")
        if self.drift < 0:
            raise ValueError("faults.drift must be >= 0")
        if self.aging_levels < 1 or self.repetitions < 1:
            raise ValueError("faults.aging_levels and faults.repetitions must be >= 1")
        unknown = set(self.grids) - {"bits", "drift_r", "stuck_fraction", "aging"}
        if unknown:
            raise ValueError(f"unknown sweep grid(s) {sorted(unknown)}")


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)

    def __post_init__(self):
        if not math.isclose(sum(self.data.fractions), 1.0) or len(self.data.fractions) != 3:
            raise ConfigError("data.fractions must be three numbers summing to 1")
        if self.train.learning_rate <= 0 or self.train.batch_size <= 0:
            raise ConfigError("train.learning_rate and train.batch_size must be positive")
        if self.train.finetune_learning_rate is not None and self.train.finetune_learning_rate <= 0:
            raise ConfigError("train.finetune_learning_rate must be positive")
        if not 0 < self.train.lr_decay <= 1:
            raise ConfigError("train.lr_decay must lie in (0, 1]")
        for k in ("epochs_initial", "epochs_regularized", "epochs_finetune"):
            if getattr(self.train, k) < 0:
                raise ConfigError(f"train.{k} must be >= 0")
        if not 2 <= self.quant.bits <= 8:
            raise ConfigError("quant.bits must lie in [2, 8]")
        a = self.clamp_levels
        if a is not None and not 1 <= a <= max_level(self.quant.bits):
            raise ConfigError("clamp levels must lie in [1, 2**bits - 1]")

    @property
    def clamp_levels(self) -> int | None:
        """Sawtooth clamp ``a``; the regularizer's own setting wins over the quantizer's."""
        if self.regularizer.clamp_levels is not None:
            return self.regularizer.clamp_levels
        return self.quant.clamp()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if value is None:
        return None
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        tp = args[0]
    try:
        if tp is bool:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if tp in (int, float, str):
            return tp(value)
        if tp is tuple:
            return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    aliases = {"global": "use_global", "clamp": "clamp_levels"}
    kwargs = {}
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{prefix}{key}.")
        else:
            kwargs[name] = _coerce(tp, value, prefix + key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def config_from_dict(raw: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, dict(raw or {}), "")


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a YAML config; dotted ``overrides`` (e.g. ``{"prune.mu": 0.5}``) are applied on top."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{path}: no such config file")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return config_from_dict(raw)
