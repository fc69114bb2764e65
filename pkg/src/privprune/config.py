"""Experiment configuration: strict YAML schema, defaults and hashing.

Unknown keys are rejected (naming the offending dotted path) so a typo in a
hyper-parameter can never silently fall back to a default. The config hash
is a SHA-256 over the canonical, fully-defaulted dictionary, so semantically
equal files hash equal regardless of key order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import yaml

from .attacks import AttackConfig
from .data import DatasetSpec
from .defenses import DefenseSpec
from .errors import ConfigurationError
from .lipschitz import LipschitzConfig
from .models import ARCH_PRESETS
from .pruning import PruneConfig
from .trainer import TrainConfig


@dataclass
class ModelSection:
    arch: str = "desk4"
    split_index: int = 4
    task_mode: str = "classification"
    base_channels: int | None = None
    num_blocks: int | None = None
    widths: list | None = None
    strides: list | None = None
    embed_dim: int = 64

    def __post_init__(self):
        if self.arch not in ARCH_PRESETS:
            raise ConfigurationError(
                f"model.arch {self.arch!r} unknown; known: {sorted(ARCH_PRESETS)}")


@dataclass
class TrainSection:
    epochs: int = 12
    pretrain_epochs: int = 8
    model_lr: float = 3e-4
    mask_lr: float = 5e-3
    batch_size: int = 128
    beta: float = 0.0004
    loss_spec: str = "cross-entropy"
    surrogate_period: int = 10
    surrogate_passes: int = 1
    surrogate_lr: float = 1e-3
    mask_granularity: str = "channel"
    mask_init: str = "normal"
    warm_start_surrogate: bool = True
    combined_objective: bool = False
    trace_phases: bool = False
    triplet_margin: float = 0.3
    use_adv: bool = True   # ablation switch: adversarial reconstruction phase
    use_lip: bool = True   # ablation switch: Lipschitz regularization phase
    prune: PruneConfig = field(default_factory=PruneConfig)
    lip: LipschitzConfig = field(default_factory=LipschitzConfig)


@dataclass
class AttackSection:
    mode: str = "black-box"  # black-box | white-box | both
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 128
    whitebox_steps: int = 300
    whitebox_step_size: float = 0.05
    tv_weight: float = 1e-4
    eval_limit: int = 256    # attack at most this many eval images

    def __post_init__(self):
        if self.mode not in ("black-box", "white-box", "both"):
            raise ConfigurationError(f"attack.mode {self.mode!r} unknown")

    def modes(self) -> list[str]:
        return ["black-box", "white-box"] if self.mode == "both" else [self.mode]

    def runtime(self, mode: str, seed: int) -> AttackConfig:
        return AttackConfig(mode=mode, epochs=self.epochs, lr=self.lr,
                            batch_size=self.batch_size,
                            whitebox_steps=self.whitebox_steps,
                            whitebox_step_size=self.whitebox_step_size,
                            tv_weight=self.tv_weight, seed=seed)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainSection = field(default_factory=TrainSection)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    attack: AttackSection = field(default_factory=AttackSection)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        self.seeds = [int(s) for s in self.seeds]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(_canonical(self.to_dict()), sort_keys=True)

    @property
    def hash(self) -> str:
        return config_hash(self)

    def train_config(self, seed: int) -> TrainConfig:
        t, d = self.train, self.defense
        return TrainConfig(
            epochs=t.epochs, model_lr=t.model_lr, mask_lr=t.mask_lr,
            batch_size=t.batch_size, beta=t.beta, loss_spec=t.loss_spec,
            task_mode=self.model.task_mode,
            prune=PruneConfig(**asdict(t.prune)),
            lip=LipschitzConfig(**asdict(t.lip)),
            surrogate_period=t.surrogate_period, surrogate_passes=t.surrogate_passes,
            surrogate_lr=t.surrogate_lr, seed=seed,
            mask_granularity=t.mask_granularity, mask_init=t.mask_init,
            warm_start_surrogate=t.warm_start_surrogate,
            combined_objective=t.combined_objective,
            use_adv=t.use_adv, use_lip=t.use_lip,
            use_prune=(d.kind == "patrol"),
            trace_phases=t.trace_phases, triplet_margin=t.triplet_margin)

    def pretrain_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.pretrain_epochs, model_lr=t.model_lr, batch_size=t.batch_size,
            loss_spec=t.loss_spec, task_mode=self.model.task_mode, seed=seed,
            use_adv=False, use_lip=False, use_prune=False,
            triplet_margin=t.triplet_margin)


_SECTION_TYPES = {
    "model": ModelSection,
    "dataset": DatasetSpec,
    "train": TrainSection,
    "defense": DefenseSpec,
    "attack": AttackSection,
}
_NESTED_IN_TRAIN = {"prune": PruneConfig, "lip": LipschitzConfig}


def _coerce(cls, data: dict, path: str):
    """Instantiate dataclass `cls` from `data`, rejecting unknown keys."""
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigurationError(f"unknown config key {path}.{key}" if path else
                                 f"unknown config key {key}")
    kwargs = {}
    for key, value in data.items():
        if path == "train" and key in _NESTED_IN_TRAIN:
            if not isinstance(value, dict):
                raise ConfigurationError(f"train.{key} must be a mapping")
            value = _coerce(_NESTED_IN_TRAIN[key], value, f"train.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid value in section {path or '<root>'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    top_known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - top_known
    if unknown:
        raise ConfigurationError(f"unknown config key {sorted(unknown)[0]}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key} must be a mapping")
            kwargs[key] = _coerce(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    return _coerce_top(kwargs)


def _coerce_top(kwargs) -> ExperimentConfig:
    try:
        return ExperimentConfig(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse, validate and default a YAML experiment config."""
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    return config_from_dict(data)


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(_canonical(config.to_dict()), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
