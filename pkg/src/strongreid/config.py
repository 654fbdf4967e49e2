"""Experiment configuration and the flat ``key = value`` config file format.

Training defaults follow the published recipe (ResNet50, 256x128 input,
P=16, K=4, Adam at 3.5e-4 for 120 epochs, every trick on). ``toy_config``
scales this down to something that trains on one CPU in well under a
minute. Dataset keys describe the synthetic generator unless
``data_manifest`` points at a manifest on disk.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields

from .exceptions import ConfigurationError

TRICKS = ("warmup", "rea", "label_smooth", "last_stride_1", "bnneck", "center")


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    data_manifest: str = ""
    domain: str = "A"
    cross_domain: str = "B"
    num_train_ids: int = 20
    num_test_ids: int = 20
    imgs_per_id: int = 40
    num_cameras: int = 4
    synthetic_size: tuple[int, int] = (64, 32)
    # model and input
    arch: str = "resnet50"
    feature_dim: int = 2048
    pretrained: bool = False
    image_size: tuple[int, int] = (256, 128)
    # sampling and optimisation
    P: int = 16
    K: int = 4
    base_lr: float = 3.5e-4
    total_epochs: int = 120
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    warmup_epochs: int = 10
    weight_decay: float = 0.0
    # tricks
    warmup: bool = True
    rea: bool = True
    label_smooth: bool = True
    last_stride_1: bool = True
    bnneck: bool = True
    center: bool = True
    # losses
    epsilon: float = 0.1
    margin: float = 0.3
    beta: float = 0.0005
    center_lr: float = 0.5
    triplet_mining: str = "batch_hard"
    # augmentation
    pad: int = 10
    flip_prob: float = 0.5
    rea_prob: float = 0.5
    rea_fill: str = "mean"
    # evaluation
    eval_metric: str = "cosine"
    max_rank: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.P < 1 or self.K < 1:
            raise ConfigurationError(f"P and K must be >= 1, got P={self.P}, K={self.K}")
        if len(self.image_size) != 2 or len(self.synthetic_size) != 2:
            raise ConfigurationError("image_size and synthetic_size take two values (height, width)")

    def estimator_params(self) -> dict:
        from .estimator import ReIDEstimator

        names = ReIDEstimator._get_param_names()
        return {k: getattr(self, k) for k in names if hasattr(self, k)}

    def with_tricks(self, **toggles) -> "ExperimentConfig":
        unknown = set(toggles) - set(TRICKS)
        if unknown:
            raise ConfigurationError(f"unknown trick(s): {sorted(unknown)}")
        return dataclasses.replace(self, **toggles)

    def replace(self, **changes) -> "ExperimentConfig":
        bad = set(changes) - {f.name for f in fields(self)}
        if bad:
            raise ConfigurationError(f"unknown config key(s): {sorted(bad)}")
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def full_config() -> ExperimentConfig:
    return ExperimentConfig()


def toy_config(**changes) -> ExperimentConfig:
    """Desk-scale recipe: tiny CNN on 64x32 synthetic people, 30 epochs."""
    cfg = ExperimentConfig(
        arch="tiny_cnn", feature_dim=64, image_size=(64, 32), synthetic_size=(64, 32),
        total_epochs=30, warmup_epochs=3, decay_epochs=(15, 25), base_lr=1e-2, pad=4,
    )
    return cfg.replace(**changes) if changes else cfg


def baseline(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.with_tricks(**{t: False for t in TRICKS})


# -- parsing -----------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_HINTS = typing.get_type_hints(ExperimentConfig)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_value(key: str, text: str):
    if key not in _HINTS:
        raise ConfigurationError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if typing.get_origin(hint) is tuple:
            parts = [p for p in text.replace("x", ",").replace(" ", "").split(",") if p]
            return tuple(int(p) for p in parts)
        return text
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {text!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return (base or ExperimentConfig()).replace(**values)


def load_config(path: str | os.PathLike, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), base)


def config_keys() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
