"""Experiment configuration: one versioned JSON document for a whole run.

The schema is strict: unknown keys are rejected and ``schema_version`` must
match. A run's config snapshot is sufficient to reproduce it bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List

from .augment import AugmentConfig
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainerConfig

SCHEMA_VERSION = 1
VALID_METRICS = ("miou", "biou", "bf1", "mf")


class ConfigError(Exception):
    """Raised for malformed or inconsistent experiment configs."""


@dataclass
class EvalConfig:
    band_k: int = 5  # tolerance kernel for 64px desk-scale images
    metrics: List[str] = field(default_factory=lambda: ["miou", "biou", "bf1", "mf"])

    def __post_init__(self):
        if self.band_k % 2 == 0 or self.band_k < 1:
            raise ValueError(f"band_k must be odd and positive, got {self.band_k}")
        bad = [m for m in self.metrics if m not in VALID_METRICS]
        if bad:
            raise ValueError(f"unknown metrics {bad}; valid names: {list(VALID_METRICS)}")


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"]["encoder_widths"] = list(d["model"]["encoder_widths"])
        return {"schema_version": SCHEMA_VERSION, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, payload: Dict[str, Any], path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in payload.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "trainer"): TrainerConfig,
    (ExperimentConfig, "augment"): AugmentConfig,
    (ExperimentConfig, "eval"): EvalConfig,
    (TrainerConfig, "weights"): LossWeights,
}


def config_from_dict(payload: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    body = {k: v for k, v in payload.items() if k != "schema_version"}
    return _build(ExperimentConfig, body, "config")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_dict(payload)
