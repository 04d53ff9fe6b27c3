"""Run configuration: dataclass sections mirroring the config file layout.

A config file is YAML with four flat sections (model, data, train, loss).
CLI ``--set section.key=value`` overrides and ``SEMISEG_<SECTION>_<KEY>``
environment variables map onto the same keys.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

ENV_PREFIX = "SEMISEG_"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    base_channels: int = 32
    depth: int = 4
    feature_channels: int = 16
    embed_dim: int = 128
    grid_side: int = 4

    def __post_init__(self):
        for name in ("base_channels", "depth", "feature_channels", "embed_dim", "grid_side"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")


@dataclass
class DataConfig:
    root: str | None = None          # directory with images/ and masks/; None -> synthetic
    side: int = 320                  # square resize applied to every sample
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    labeled_frac: float = 0.2        # fraction of the train split that keeps its masks
    split_seed: int | None = None    # None -> falls back to train.seed
    labeled_seed: int | None = None  # None -> same as split_seed
    synth_count: int = 100           # used when root is None
    synth_seed: int = 0
    flip_augment: bool = False

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"data fractions must sum to 1, got {total}")
        if not 0.0 < self.labeled_frac <= 1.0:
            raise ConfigError(f"data.labeled_frac must be in (0, 1], got {self.labeled_frac}")
        if self.side <= 0:
            raise ConfigError(f"data.side must be positive, got {self.side}")


@dataclass
class TrainConfig:
    total_epochs: int = 300
    stage1_epochs: int = 100         # epochs with (alpha, 0); the rest run (0, beta)
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.total_epochs <= 0:
            raise ConfigError(f"train.total_epochs must be positive, got {self.total_epochs}")
        # 0 or total_epochs turns one stage off; used by the ablation variants.
        if not 0 <= self.stage1_epochs <= self.total_epochs:
            raise ConfigError(
                f"train.stage1_epochs must be in [0, total_epochs], got {self.stage1_epochs}"
            )
        if self.labeled_per_batch < 0 or self.unlabeled_per_batch < 0:
            raise ConfigError("batch sizes must be non-negative")
        if self.labeled_per_batch + self.unlabeled_per_batch == 0:
            raise ConfigError("at least one of labeled/unlabeled per-batch counts must be positive")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")


@dataclass
class LossConfig:
    alpha: float = 1.0               # contrastive weight during stage 1
    beta: float = 1.0                # consistency weight during stage 2
    tau: float = 0.1                 # contrastive temperature
    num_negatives: int | None = None  # None -> all other grid cells are negatives

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"loss.tau must be positive, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss.alpha and loss.beta must be non-negative")
        if self.num_negatives is not None and self.num_negatives <= 0:
            raise ConfigError(f"loss.num_negatives must be positive, got {self.num_negatives}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        """Cross-section checks done once the pipeline is assembled."""
        side = self.data.side
        ds = 2 ** self.model.depth
        if side % ds != 0:
            raise ConfigError(f"data.side={side} is not divisible by 2^depth={ds}")
        n = self.model.grid_side
        if side % n != 0:
            raise ConfigError(f"data.side={side} is not divisible by grid_side={n}")
        patch = side // n
        if patch % ds != 0:
            raise ConfigError(
                f"patch side {patch} (= side/grid_side) is not divisible by 2^depth={ds}"
            )

    def resolved_split_seed(self) -> int:
        return self.data.split_seed if self.data.split_seed is not None else self.train.seed

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "loss": LossConfig,
}


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def desk_config() -> ExperimentConfig:
    """Small profile for CPU-scale tests: 64px images, shallow U-Net."""
    cfg = ExperimentConfig()
    cfg.model = ModelConfig(base_channels=8, depth=3, feature_channels=16, embed_dim=16,
                            grid_side=4)
    cfg.data.side = 64
    return cfg


def valid_keys() -> list[str]:
    keys = []
    for section, cls in SECTIONS.items():
        keys.extend(f"{section}.{f.name}" for f in dataclasses.fields(cls))
    return keys


def _coerce(value: Any, section: str, name: str, current: Any) -> Any:
    """Coerce a YAML/env scalar onto the type of the default field value."""
    if value is None:
        return None
    if isinstance(current, bool) or (current is None and isinstance(value, bool)):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
        raise ConfigError(f"cannot parse boolean for {section}.{name}: {value!r}")
    if isinstance(current, bool):
        raise ConfigError(f"cannot parse boolean for {section}.{name}: {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            return int(value)
        raise ConfigError(f"expected integer for {section}.{name}, got {value!r}")
    if isinstance(current, float):
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            return float(value)
        raise ConfigError(f"expected float for {section}.{name}, got {value!r}")
    if isinstance(current, str) or current is None:
        # Optional fields (split_seed, num_negatives, root): ints stay ints.
        return value
    raise ConfigError(f"unsupported config value for {section}.{name}: {value!r}")


def set_key(cfg: ExperimentConfig, dotted: str, value: Any) -> None:
    if "." not in dotted:
        raise ConfigError(f"unknown config key '{dotted}'; valid keys: {', '.join(valid_keys())}")
    section, name = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config key '{dotted}'; valid keys: {', '.join(valid_keys())}")
    target = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(target)}
    if name not in names:
        raise ConfigError(f"unknown config key '{dotted}'; valid keys: {', '.join(valid_keys())}")
    coerced = _coerce(value, section, name, getattr(target, name))
    setattr(target, name, coerced)
    target.__post_init__()


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> None:
    """Apply repeatable ``--set section.key=value`` overrides."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form section.key=value")
        key, raw = pair.split("=", 1)
        set_key(cfg, key.strip(), yaml.safe_load(raw))


def apply_env_overrides(cfg: ExperimentConfig, environ=os.environ) -> None:
    """Apply SEMISEG_<SECTION>_<KEY>=value environment overrides."""
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        if "_" not in rest:
            raise ConfigError(f"malformed environment override {var}")
        section, name = rest.split("_", 1)
        set_key(cfg, f"{section}.{name}", yaml.safe_load(raw))


def load_config(path: str | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path`` merged on top."""
    cfg = default_config()
    if path is None:
        return cfg
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must be a mapping of sections")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(
                f"unknown config section '{section}'; valid sections: {', '.join(SECTIONS)}"
            )
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"config section '{section}' must be a mapping")
        for name, value in body.items():
            set_key(cfg, f"{section}.{name}", value)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {section: dataclasses.asdict(getattr(cfg, section)) for section in SECTIONS}


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
