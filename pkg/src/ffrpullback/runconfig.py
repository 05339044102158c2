"""Unified JSON run configuration: one file drives data generation,
training, cross-validation, ablations and evaluation.

Validation is strict: unknown keys or out-of-range values are rejected with
the offending field path, so a run is fully reproducible from the single
resolved config stored next to its outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .losses import AblationFlags, HistogramConfig, LossWeights
from .metrics import PPGConfig
from .network import NetworkConfig
from .synthetic import OracleConfig, SyntheticConfig
from .trainer import LRSchedule, TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; message carries the field path."""


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ppg: PPGConfig = field(default_factory=PPGConfig)


_TUPLE_FIELDS = {
    "length_range_mm",
    "proximal_area_range_mm2",
    "taper_fraction_range",
    "lesion_count_weights",
    "focal_extent_range_mm",
    "diffuse_extent_range_mm",
    "focal_severity_range",
    "diffuse_severity_range",
    "confuser_depth_range",
    "misregistration_range_mm",
    "measured_fraction_range",
    "lumen_dilations",
}


def _build(cls, obj: dict, path: str, nested: dict | None = None):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
        if key in nested:
            kwargs[key] = _build(nested[key][0], value, f"{path}.{key}", nested[key][1] if len(nested[key]) > 1 else None)
        elif key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{key}: expected an array")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        bad = _offending_field(str(exc), names)
        where = f"{path}.{bad}" if bad else path
        raise ConfigError(f"{where}: {exc}") from exc


def _offending_field(message: str, names: set) -> str | None:
    for name in names:
        if name in message:
            return name
    return None


_SECTIONS = {
    "synthetic": (SyntheticConfig, {"oracle": (OracleConfig,)}),
    "network": (NetworkConfig,),
    "train": (TrainConfig, {"schedule": (LRSchedule,)}),
    "loss_weights": (LossWeights,),
    "histogram": (HistogramConfig,),
    "flags": (AblationFlags,),
    "ppg": (PPGConfig,),
}


def run_config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    unknown = set(obj) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    synthetic = _build(SyntheticConfig, obj.get("synthetic", {}), "synthetic", {"oracle": (OracleConfig,)})
    network = _build(NetworkConfig, obj.get("network", {}), "network")
    train = _build(TrainConfig, obj.get("train", {}), "train", {"schedule": (LRSchedule,)})
    weights = _build(LossWeights, obj.get("loss_weights", {}), "loss_weights")
    histogram = _build(HistogramConfig, obj.get("histogram", {}), "histogram")
    flags = _build(AblationFlags, obj.get("flags", {}), "flags")
    ppg = _build(PPGConfig, obj.get("ppg", {}), "ppg")
    train = dataclasses.replace(train, loss_weights=weights, histogram=histogram, flags=flags)
    return RunConfig(synthetic=synthetic, network=network, train=train, ppg=ppg)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(obj)


def run_config_to_dict(cfg: RunConfig) -> dict:
    def plain(value):
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return list(value)
        return value

    train = plain(cfg.train)
    weights = train.pop("loss_weights")
    histogram = train.pop("histogram")
    flags = train.pop("flags")
    return {
        "synthetic": plain(cfg.synthetic),
        "network": plain(cfg.network),
        "train": train,
        "loss_weights": weights,
        "histogram": histogram,
        "flags": flags,
        "ppg": plain(cfg.ppg),
    }


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(run_config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path scalar overrides, e.g. {'train.seed': 7}."""
    obj = run_config_to_dict(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = obj
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{dotted}: unknown override path")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{dotted}: unknown override path")
        node[parts[-1]] = value
    return run_config_from_dict(obj)
