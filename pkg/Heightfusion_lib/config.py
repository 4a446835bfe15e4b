# Heightfusion_lib/config.py
"""
Training configuration: defaults from data/train_defaults.json, an optional
flat key=value file, then command-line overrides, in that order.
"""
import dataclasses
import logging
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional

from .errors import ConfigError
from .model_zoo import ArchScale, FusionVariant
from .utils import load_data_from_json

logger = logging.getLogger(__name__)

OPTIMIZERS = ('sgd', 'adam')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 36
    batch_size: int = 16
    optimizer: str = 'sgd'
    lr: float = 0.01
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    smooth_l1_beta: float = 1.0
    variant: str = 'early'
    skip_connections: bool = True
    arch: str = 'desk'
    # 0 = run all epochs; otherwise stop after this many optimizer steps
    max_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive, got {self.epochs}/{self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}'. Available: {', '.join(OPTIMIZERS)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.smooth_l1_beta <= 0:
            raise ConfigError(f"smooth_l1_beta must be positive, got {self.smooth_l1_beta}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be non-negative, got {self.max_steps}")
        FusionVariant.parse(self.variant, self.skip_connections)

    @property
    def fusion_variant(self) -> FusionVariant:
        return FusionVariant.parse(self.variant, self.skip_connections)

    @property
    def arch_scale(self) -> ArchScale:
        return ArchScale.preset(self.arch)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind: type, raw: Any):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"Config key '{name}' expects {kind.__name__}, got {text!r}")


def build_config(values: Dict[str, Any]) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    types = {'int': int, 'float': float, 'str': str, 'bool': bool}
    coerced = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{key}'. Known keys: {', '.join(known)}")
        kind = known[key] if isinstance(known[key], type) else types[known[key]]
        coerced[key] = _coerce(key, kind, raw)
    return TrainConfig(**coerced)


def default_values() -> Dict[str, Any]:
    return dict(load_data_from_json('train_defaults.json'))


def load_config_file(path) -> Dict[str, str]:
    """Flat key=value lines; blank lines and '#' comments are ignored."""
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep or not key.strip():
                raise ConfigError(f"'{path}' line {lineno}: expected key=value, got {line!r}")
            values[key.strip()] = value.strip()
    return values


def merge_overrides(base: Dict[str, Any], overrides: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    merged = dict(base)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return merged


def resolve_config(config_path=None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    values = default_values()
    if config_path:
        values = merge_overrides(values, load_config_file(config_path))
    config = build_config(merge_overrides(values, overrides))
    logger.debug("resolved config: %s", config)
    return config
