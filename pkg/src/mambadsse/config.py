"""Strict JSON run configuration.

A config file holds up to four sections (``feeder``, ``model``, ``train``,
``experiment``); every field is optional and falls back to the defaults below.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .engine import EngineConfig
from .model import ModelConfig
from .training import TrainConfig

VARIANT_ALIASES = {"dsse": "mamba_dsse", "mixer": "mamba_mixer", "mamba_dsse": "mamba_dsse", "mamba_mixer": "mamba_mixer"}


class ConfigError(ValueError):
    pass


@dataclass
class FeederConfig:
    n_buses: int = 12
    pv_fraction: float = 0.25
    days: float = 30.0
    resolution_minutes: int = 15
    observability: float = 0.10
    sigma_v_range: list[float] = field(default_factory=lambda: [0.01, 0.03])
    sigma_pq: float = 0.05
    sigma_i: float = 0.05
    train_fraction: float = 2 / 3
    csv_export: bool = False


@dataclass
class ModelSection:
    variant: str = "dsse"
    expansion: float = 1.5
    d_lift: int | None = None
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    decoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    n_blocks: int = 2
    d_model: int = 32
    n_state: int = 8
    sigma_q_per_window: bool = False
    window: int = 24
    lambda_pred: float = 1.0
    equalize_params: bool = True

    def __post_init__(self):
        if self.variant not in VARIANT_ALIASES:
            raise ConfigError(f"model.variant must be one of dsse, mixer; got {self.variant!r}")

    def build(self, n_buses: int, d_in: int, lambda_rec: float, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            variant=VARIANT_ALIASES[variant or self.variant],
            n_buses=n_buses,
            d_in=d_in,
            expansion=self.expansion,
            d_lift=self.d_lift,
            encoder_hidden=list(self.encoder_hidden),
            decoder_hidden=list(self.decoder_hidden),
            engine=EngineConfig(self.n_blocks, self.d_model, self.n_state, self.sigma_q_per_window),
            window=self.window,
            lambda_pred=self.lambda_pred,
            lambda_rec=lambda_rec,
            equalize_params=self.equalize_params,
        )


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sizes: list[int] = field(default_factory=lambda: [12, 40, 120])
    base_resolution: int = 1
    factors: list[int] = field(default_factory=lambda: [1, 2, 5, 15])
    windows: list[int] = field(default_factory=lambda: [8, 24, 48, 96])
    pv_fractions: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5])
    # 24h, 48h, 72h, 168h at 15-minute resolution
    bench_windows: list[int] = field(default_factory=lambda: [96, 192, 288, 672])
    bench_repeats: int = 100
    eval_stride: int = 1


@dataclass
class RunConfig:
    feeder: FeederConfig = field(default_factory=FeederConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        sections = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        types = {"feeder": FeederConfig, "model": ModelSection, "train": TrainConfig, "experiment": ExperimentConfig}
        built = {name: _section(types[name], raw.get(name, {}), name) for name in sections}
        return cls(**built)


def _section(kind, raw: Any, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name: f for f in fields(kind)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    defaults = kind()
    values = {}
    for key, value in raw.items():
        values[key] = _coerce(value, getattr(defaults, key), f"{name}.{key}")
    try:
        return kind(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def _coerce(value, default, where: str):
    """Check a JSON value against the type of the field's default."""
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{where}: expected an integer or null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if default:
            return [_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value)]
        return list(value)
    return value


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
