"""Run configuration: defaults < JSON config file < command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .encoder import EncoderConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    partition_factor: int = 1
    embed_dim: int = 64
    window_size: int = 4
    mlp_hidden: int = 128
    attention_kernel: int = 3
    num_layers: int = 1


@dataclass
class TreeSection:
    depth: int = 3
    proto_size: int = 3


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    decay_steps: int = 5
    decay_rate: float = 0.90
    lr_schedule: str = "staircase"
    patience: int | None = None
    val_fraction: float = 0.2
    clip_norm: float | None = 5.0
    no_tree: bool = False
    no_attention: bool = False


@dataclass
class RunConfig:
    data_root: str = ""
    dataset: str = "BasicMotions"
    out: str = "runs/default"
    seed: int = 0
    fine_tune_from: str | None = None
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tree: TreeSection = field(default_factory=TreeSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        if not self.data_root:
            self.data_root = os.environ.get("ST_TREE_DATA", "data")

    def validate(self) -> None:
        try:
            self.encoder_config(1, 2).validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.tree.depth < 1:
            raise ConfigError("tree depth must be >= 1")
        if self.tree.proto_size < 1:
            raise ConfigError("proto_size must be >= 1")
        if not 0 < self.train.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")

    def encoder_config(self, num_channels: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(num_channels=num_channels, num_classes=num_classes,
                             use_attention=not self.train.no_attention, **asdict(self.encoder))

    def model_config(self, num_channels: int, num_classes: int) -> ModelConfig:
        return ModelConfig(self.encoder_config(num_channels, num_classes), depth=self.tree.depth,
                           proto_size=self.tree.proto_size, use_tree=not self.train.no_tree,
                           seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.train))

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"encoder": EncoderSection, "tree": TreeSection, "train": TrainSection}


def _check_keys(d: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(d, RunConfig, "config")
    kwargs = {}
    for k, v in d.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"section {k!r} must be an object")
            _check_keys(v, _SECTIONS[k], k)
            try:
                kwargs[k] = _SECTIONS[k](**v)
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        else:
            kwargs[k] = v
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(d)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Apply any command-line flag that was given explicitly (not None / not False)."""
    top = {"data_root": "data_root", "dataset": "dataset", "out": "out", "seed": "seed",
           "fine_tune_from": "fine_tune_from"}
    for attr, key in top.items():
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "depth", None) is not None:
        cfg.tree.depth = args.depth
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "no_tree", False):
        cfg.train.no_tree = True
    if getattr(args, "no_attention", False):
        cfg.train.no_attention = True
    return cfg
