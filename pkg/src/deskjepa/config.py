"""Experiment configuration: YAML sections data, jepa, mae, probe, perturb, sweep.

Unknown keys are rejected with their dotted path. The encoder lives under
``jepa.encoder`` and is shared by the pixel baseline so the pair stays matched.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .jepa import JepaConfig
from .mae import MaeConfig
from .masking import MaskSpec
from .perturb import MAIN_GRID
from .probe import ProbeProtocol
from .synth import SynthConfig
from .vit import TubeletConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class FeatureConfig:
    """How frozen encoder tokens are pooled before probing, shared by every backbone."""

    pool: tuple[int, int, int] = (1, 4, 4)
    batch_size: int = 64


@dataclass(frozen=True)
class PerturbSection:
    grid: tuple[str, ...] = MAIN_GRID
    mask: str = "sector"
    seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    label_fractions: tuple[float, ...] = (0.01, 0.1, 1.0)
    efficiency_fraction: float = 0.1
    rv_missing_rate: float = 0.5


@dataclass(frozen=True)
class ProbeSection:
    protocol: ProbeProtocol = field(default_factory=ProbeProtocol)
    features: FeatureConfig = field(default_factory=FeatureConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    jepa: JepaConfig = field(default_factory=JepaConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        d = _to_plain(self)
        del d["mae"]["encoder"]
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        full = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(full, "unknown key")
        kwargs[key] = _coerce(hints[key], val, full)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _coerce(tp, val, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, val, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(val, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {val!r}")
        args = typing.get_args(tp)
        elem = args[0] if args else Any
        return tuple(_coerce(elem, v, path) for v in val)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if val is None:
            return None
        return _coerce(args[0], val, path)
    if tp is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(path, f"expected a number, got {val!r}")
        return float(val)
    if tp is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(path, f"expected an integer, got {val!r}")
        return val
    if tp is bool:
        if not isinstance(val, bool):
            raise ConfigError(path, f"expected true/false, got {val!r}")
        return val
    if tp is str:
        return str(val)
    return val


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    mae_raw = dict(raw.get("mae") or {})
    if "encoder" in mae_raw:
        raise ConfigError("mae.encoder", "the pixel baseline shares jepa.encoder; set it there")
    cfg = _build(ExperimentConfig, {k: v for k, v in raw.items() if k != "mae"}, "")
    mae = _build(MaeConfig, {**mae_raw, "encoder": _to_plain(cfg.jepa.encoder)}, "mae")
    return dataclasses.replace(cfg, mae=mae)


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return from_dict(raw)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """The same experiment with every model-side seed replaced (data seed kept)."""
    return dataclasses.replace(
        cfg,
        jepa=dataclasses.replace(cfg.jepa, seed=seed),
        mae=dataclasses.replace(cfg.mae, seed=seed),
        probe=dataclasses.replace(cfg.probe, protocol=dataclasses.replace(cfg.probe.protocol, seed=seed)),
    )


__all__ = [
    "ConfigError", "ExperimentConfig", "FeatureConfig", "PerturbSection", "ProbeSection", "SweepConfig",
    "from_dict", "load", "with_seed", "MaskSpec", "TubeletConfig",
]
