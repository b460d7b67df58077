"""Declarative run configuration (YAML or JSON) mapped onto the dataclass configs."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from fairwake.augment import (AugmentationPolicy, FilterAugmentConfig, FreqMaskConfig,
                              FreqMixStyleConfig)
from fairwake.corpus import SynthSpec
from fairwake.errors import ConfigError
from fairwake.training import KdConfig, TrainConfig

SECTIONS = ("train", "kd", "augment", "synth")


def load_config(path: str | Path | None) -> dict[str, dict]:
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return raw


def _build(cls, values: dict | None, **overrides):
    values = dict(values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def train_config(cfg: dict, **overrides) -> TrainConfig:
    return _build(TrainConfig, cfg.get("train"), **overrides)


def kd_config(cfg: dict, **overrides) -> KdConfig:
    return _build(KdConfig, cfg.get("kd"), **overrides)


def synth_spec(cfg: dict, **overrides) -> SynthSpec:
    return _build(SynthSpec, cfg.get("synth"), **overrides)


def augmentation_policy(cfg: dict) -> AugmentationPolicy | None:
    section: dict[str, Any] | None = cfg.get("augment")
    if section is None:
        return None
    section = dict(section)
    nested = {"freq_mix_style": FreqMixStyleConfig, "filter_augment": FilterAugmentConfig,
              "freq_mask": FreqMaskConfig}
    for key, cls in nested.items():
        if key in section:
            section[key] = _build(cls, section[key])
    if "impulse_responses" in section:
        raise ConfigError("impulse responses come from manifest rows with role 'dir', not the config")
    return _build(AugmentationPolicy, section)
