"""Experiment configuration: dataclasses mirrored by a TOML file with one
section per group (optimizer, lr_schedule, diffkd, synthetic, and a
[[heads]] array)."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import DiffKDConfig
from .errors import ConfigError

DATASETS = ("cifar10", "cifar100", "synthetic")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class LRScheduleConfig:
    kind: str = "multistep"  # multistep | cosine | constant
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1


@dataclass
class HeadConfig:
    feature_tap: str = "backbone"
    use_autoencoder: bool = False
    latent_channels: int = 0
    distance: str = "mse"


@dataclass
class SyntheticConfig:
    """Gaussian-mixture image classification stand-in dataset."""

    classes: int = 10
    channels: int = 3
    image_size: int = 32
    train_size: int = 4000
    eval_size: int = 2000
    noise_std: float = 1.0
    modes_per_class: int = 2
    signal_scale: float = 1.0


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_root: str = "data"
    subset_size: int | None = None
    num_classes: int = 10
    teacher_arch: str = "resnet56"
    student_arch: str = "resnet20"
    teacher_checkpoint: str = ""
    epochs: int = 12
    batch_size: int = 64
    seed: int = 0
    log_interval: int = 50
    augment: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: LRScheduleConfig = field(default_factory=LRScheduleConfig)
    diffkd: DiffKDConfig = field(default_factory=DiffKDConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    heads: list[HeadConfig] = field(default_factory=list)

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"unknown dataset {self.dataset!r}; expected one of {DATASETS}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        self.diffkd.validate()
        if self.diffkd.lambda_kd > 0 and not self.heads:
            raise ConfigError("heads must be non-empty when lambda_kd > 0")
        if self.teacher_checkpoint and not Path(self.teacher_checkpoint).exists():
            raise ConfigError(
                f"teacher_checkpoint does not exist: {self.teacher_checkpoint}"
            )


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]")
    return data


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    nested = {
        "optimizer": OptimizerConfig,
        "lr_schedule": LRScheduleConfig,
        "diffkd": DiffKDConfig,
        "synthetic": SyntheticConfig,
    }
    kwargs = {}
    for key, cls in nested.items():
        section = data.pop(key, {})
        kwargs[key] = cls(**_build(cls, section, key))
    heads = data.pop("heads", [])
    kwargs["heads"] = [HeadConfig(**_build(HeadConfig, h, "heads")) for h in heads]
    kwargs.update(_build(ExperimentConfig, data, "experiment"))
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(data)
