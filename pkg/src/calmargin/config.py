"""Experiment configuration: strict JSON schema onto dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .tensor_store import ValidationError
from .trainer import SyntheticTask, TrainSchedule

DEFAULT_NOISE_GRID = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05]
MASK_RULES = ("union", "all")


class ConfigError(ValueError):
    """Malformed or unknown configuration keys."""


@dataclass
class ModelSettings:
    radius: int = 1
    hidden: int = 32
    input_center: float = 0.5
    input_scale: float = 4.0


@dataclass
class MetricSettings:
    num_bins: int = 15
    background: int = 0
    mask_rule: str = "union"

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValidationError("num_bins must be >= 1")
        if self.mask_rule not in MASK_RULES:
            raise ValidationError(f"mask_rule must be one of {MASK_RULES}")


def default_losses() -> list[LossConfig]:
    return [LossConfig("CE"), LossConfig("MBLS_L1", margin=8.0, lam=0.1, name="MBLS_m8")]


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: SyntheticTask = field(default_factory=SyntheticTask)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    model: ModelSettings = field(default_factory=ModelSettings)
    losses: list[LossConfig] = field(default_factory=default_losses)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    temperature_scaling: bool = True
    ts_foreground_only: bool = True
    noise_grid: list[float] = field(default_factory=lambda: list(DEFAULT_NOISE_GRID))
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.task.seed = self.seed
        names = [l.name for l in self.losses]
        if not names:
            raise ValidationError("at least one loss is required")
        if len(set(names)) != len(names):
            raise ValidationError(f"loss names must be unique: {names}")
        if self.metrics.background >= self.task.num_classes:
            raise ValidationError("background class out of range")
        if any(s < 0 for s in self.noise_grid):
            raise ValidationError("noise sigmas must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"].pop("seed")
        d["schedule"]["lr_stages"] = [list(s) for s in d["schedule"]["lr_stages"]]
        return d

    def hash(self) -> str:
        """Stable digest of everything that affects results (not the output location)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a validated config; any bad key or value raises ConfigError."""
    try:
        return _from_dict(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kw = dict(data)
    if "task" in kw:
        if isinstance(kw["task"], dict) and "seed" in kw["task"]:
            raise ConfigError("task: set the root 'seed' instead of task.seed")
        kw["task"] = _build(SyntheticTask, kw["task"], "task")
    if "schedule" in kw:
        kw["schedule"] = _build(TrainSchedule, kw["schedule"], "schedule")
    if "model" in kw:
        kw["model"] = _build(ModelSettings, kw["model"], "model")
    if "metrics" in kw:
        kw["metrics"] = _build(MetricSettings, kw["metrics"], "metrics")
    if "losses" in kw:
        if not isinstance(kw["losses"], list):
            raise ConfigError("losses: expected a list")
        kw["losses"] = [_build(LossConfig, l, f"losses[{i}]") for i, l in enumerate(kw["losses"])]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return config_from_dict(data)
