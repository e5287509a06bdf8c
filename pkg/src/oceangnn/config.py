"""JSON experiment configuration with every default spelled out."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import REGIONS, SPECTRAL_REGIONS
from .gnn_model import ModelConfig
from .rollout import FORCING_KINDS
from .synthetic import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainingSection:
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1
    steps_phase1: int = 1000
    steps_phase2: int = 200
    seed: int = 0
    checkpoint_every: int = 0
    val_every: int = 0
    val_samples: int = 16
    loss_weights: list | None = None
    train_days: list | None = None  # inclusive [first, last] initial day
    val_days: list | None = None

    def train_config(self, phase: int, out_dir, init_checkpoint=None) -> TrainConfig:
        return TrainConfig(
            phase=phase,
            lr=self.lr_phase1 if phase == 1 else self.lr_phase2,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            steps=self.steps_phase1 if phase == 1 else self.steps_phase2,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            val_every=self.val_every,
            val_samples=self.val_samples,
            loss_weights=self.loss_weights,
            train_days=None if self.train_days is None else tuple(self.train_days),
            val_days=None if self.val_days is None else tuple(self.val_days),
            init_checkpoint=None if init_checkpoint is None else str(init_checkpoint),
            out_dir=str(out_dir),
        )


@dataclass
class RolloutSection:
    horizon: int = 10
    forcing: str = "forecast"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.forcing not in FORCING_KINDS:
            raise ValueError(f"forcing must be one of {FORCING_KINDS}")


@dataclass
class EvaluationSection:
    cos_lat: bool = False
    window: str = "hann"
    regions: list = field(default_factory=lambda: ["global", *REGIONS])
    spectral_regions: list = field(default_factory=lambda: list(SPECTRAL_REGIONS))


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "run"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        t = hints[name]
        if dataclasses.is_dataclass(t):
            value = _build(t, value, f"{where}{name}.")
        elif isinstance(value, list) and typing.get_origin(t) is tuple:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
