"""Flat ``key = value`` experiment configuration.

Keys are ``section.field`` for the dataclass sections below (``train.lr``,
``aug.flip_prob``...) plus a few top-level keys. Lists are comma
separated; ``none`` stands for an absent optional value. The global
``seed`` feeds every stage, so sections do not carry their own seed.
"""
from __future__ import annotations

import collections.abc
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

from retro.data import AugmentationConfig
from retro.evaluate import ProbeConfig
from retro.nn import EMBED_DIM, EncoderConfig
from retro.train import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar
    path: str = ""  # cifar: training batch file(s), comma separated
    test_path: str = ""
    classes: int = 10
    per_class: int = 600
    test_per_class: int = 100
    image_size: int = 32
    seed: int = 1234

    def validate(self) -> None:
        if self.source not in ("synthetic", "cifar"):
            raise ConfigFileError(f"data.source must be synthetic or cifar, got {self.source!r}")
        if self.source == "cifar" and not (self.path and self.test_path):
            raise ConfigFileError("data.source = cifar needs data.path and data.test_path")


@dataclass
class NetworkConfig:
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    strides: List[int] = field(default_factory=lambda: [4, 2, 1])
    head_hidden: int = 64

    def encoder_config(self) -> EncoderConfig:
        cfg = EncoderConfig(widths=list(self.widths), strides=list(self.strides))
        cfg.validate()
        return cfg


def _teacher_network() -> NetworkConfig:
    return NetworkConfig(widths=[32, 64, 256], head_hidden=256)


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(mode="baseline_moco", epochs=20, ema_momentum=0.99)


def _train_defaults() -> TrainConfig:
    return TrainConfig(ema_momentum=0.99)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    embed_dim: int = EMBED_DIM
    knn_k: int = 20
    data: DataConfig = field(default_factory=DataConfig)
    teacher: NetworkConfig = field(default_factory=_teacher_network)
    student: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    train: TrainConfig = field(default_factory=_train_defaults)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` pushed into every section that consumes one."""
        cfg = dataclasses.replace(self, seed=seed)
        cfg.pretrain = dataclasses.replace(self.pretrain, seed=seed, mode="baseline_moco")
        cfg.train = dataclasses.replace(self.train, seed=seed)
        cfg.aug = dataclasses.replace(self.aug, seed=seed)
        cfg.probe = dataclasses.replace(self.probe, seed=seed)
        return cfg

    def validate(self) -> None:
        self.data.validate()
        self.teacher.encoder_config()
        self.student.encoder_config()
        self.pretrain.validate()
        self.train.validate()
        self.aug.validate()
        self.probe.validate()
        if self.knn_k < 1:
            raise ConfigFileError(f"knn_k must be >= 1, got {self.knn_k}")


SECTIONS = ("data", "teacher", "student", "pretrain", "train", "aug", "probe")
# fields owned by the global seed or fixed by the stage
DERIVED = {"pretrain.seed", "pretrain.mode", "pretrain.frozen_epochs", "pretrain.unfrozen_epochs",
           "pretrain.gamma", "pretrain.consistency_weight", "train.seed", "aug.seed", "probe.seed"}
REQUIRED = ("data.source", "train.mode")


def _leaf_types() -> Dict[str, object]:
    hints = typing.get_type_hints(ExperimentConfig)
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in SECTIONS:
            sub = typing.get_type_hints(hints[f.name])
            for sf in dataclasses.fields(hints[f.name]):
                key = f"{f.name}.{sf.name}"
                if key not in DERIVED:
                    out[key] = sub[sf.name]
        else:
            out[f.name] = hints[f.name]
    return out


KEY_TYPES = _leaf_types()


def _parse_value(key: str, text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union and type(None) in args:
            if text.lower() == "none":
                return None
            return _parse_value(key, text, next(a for a in args if a is not type(None)))
        if origin in (list, tuple, collections.abc.Sequence):
            elem = args[0] if args else float
            items = [s.strip() for s in text.split(",") if s.strip()]
            values = [_parse_value(key, s, elem) for s in items]
            return values if origin is list else tuple(values)
        if tp is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {tp}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str) -> ExperimentConfig:
    """Parse config text; unknown, duplicate or missing required keys are errors."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEY_TYPES:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigFileError(f"missing required keys: {', '.join(missing)}")
    cfg = ExperimentConfig()
    for key in sorted(values):
        parsed = _parse_value(key, values[key], KEY_TYPES[key])
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(cfg, section), name, parsed)
        else:
            setattr(cfg, key, parsed)
    cfg = cfg.with_seed(cfg.seed)
    cfg.validate()
    return cfg


def to_text(cfg: ExperimentConfig) -> str:
    """Every key in sorted order, so serialising a parsed config is a fixed point."""
    lines = []
    for key in sorted(KEY_TYPES):
        if "." in key:
            section, name = key.split(".", 1)
            value = getattr(getattr(cfg, section), name)
        else:
            value = getattr(cfg, key)
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text)


def fingerprint(cfg: ExperimentConfig, stage: str = "") -> str:
    """Short content hash of the canonical config text plus the stage name."""
    return hashlib.sha256((to_text(cfg) + stage).encode("utf-8")).hexdigest()[:12]
