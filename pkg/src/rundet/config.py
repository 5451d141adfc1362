"""Experiment configuration: INI-style sections of ``key = value`` lines.

Every key has a default; unknown sections or keys are rejected so a typo
cannot silently fall back to a default.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    # 1-based stage indices whose outputs feed prediction
    sources: tuple[int, ...] = (3, 4, 5, 6)
    l2norm: bool = True
    # 20 is the usual gain for pretrained features; from scratch its
    # gradient amplification (gamma / ||x||) kills the early ReLUs
    l2norm_gamma: float = 5.0


@dataclass
class ResblockConfig:
    mode: str = "3way"  # none | 2way | 3way
    depth: int = 32
    branch1: bool = True
    branch2: bool = True
    branch3: bool = True
    post_relu: bool = False


@dataclass
class HeadConfig:
    mode: str = "unified"  # unified | separate
    num_classes: int = 3
    boxes_per_location: int = 6


@dataclass
class BoxesConfig:
    s_min: float = 0.2
    s_max: float = 0.9
    variances: tuple[float, ...] = (0.1, 0.2)
    match_threshold: float = 0.5
    nms_iou: float = 0.45
    conf_floor: float = 0.01
    top_k: int = 200
    containment_iof: float = 0.9


@dataclass
class LossConfig:
    neg_pos_ratio: float = 3.0


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-3
    iterations: int = 6000
    milestones: tuple[int, ...] = (4000, 5000)
    finetune_lr: float = 1e-3
    finetune_iterations: int = 2000
    # empty means 4/7 and 6/7 of finetune_iterations
    finetune_milestones: tuple[int, ...] = ()
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True


@dataclass
class DataConfig:
    train: str = "data/train"
    test: str = "data/test"


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    small_area: float = 144.0
    medium_area: float = 900.0
    recall_top: int = 100
    bib_min_score: float = 0.3


SECTIONS = {
    "backbone": BackboneConfig,
    "resblock": ResblockConfig,
    "head": HeadConfig,
    "boxes": BoxesConfig,
    "loss": LossConfig,
    "schedule": ScheduleConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    resblock: ResblockConfig = field(default_factory=ResblockConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    boxes: BoxesConfig = field(default_factory=BoxesConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``replace(**{"resblock.mode": "2way"})``."""
        cfg = from_text(to_text(self))
        for key, value in overrides.items():
            _set(cfg, key, value)
        return cfg


def _parse(value, tp):
    value = value.strip() if isinstance(value, str) else value
    if not isinstance(value, str):
        return tuple(value) if tp in (tuple[int, ...], tuple[float, ...]) else tp(value)
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if tp == tuple[int, ...]:
        return tuple(int(v) for v in value.split(",") if v.strip())
    if tp == tuple[float, ...]:
        return tuple(float(v) for v in value.split(",") if v.strip())
    return tp(value)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _set(cfg, dotted, value):
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    sec = getattr(cfg, section)
    hints = get_type_hints(type(sec))
    if key not in hints:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    try:
        setattr(sec, key, _parse(value, hints[key]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {value!r}") from exc


def from_text(text):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            _set(cfg, f"{section}.{key}", value)
    validate(cfg)
    return cfg


def load(path):
    with open(path, encoding="utf-8") as fh:
        return from_text(fh.read())


def to_text(cfg):
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)


def save(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(cfg))


def validate(cfg):
    b = cfg.backbone
    if len(b.sources) < 2:
        raise ConfigError("backbone.sources needs at least two levels")
    if list(b.sources) != sorted(set(b.sources)):
        raise ConfigError("backbone.sources must be strictly increasing")
    if b.sources[-1] > len(b.widths) or b.sources[0] < 1:
        raise ConfigError("backbone.sources refer to stages that do not exist")
    if cfg.resblock.mode not in ("none", "2way", "3way"):
        raise ConfigError(f"resblock.mode must be none, 2way or 3way, got {cfg.resblock.mode!r}")
    if cfg.head.mode not in ("unified", "separate"):
        raise ConfigError(f"head.mode must be unified or separate, got {cfg.head.mode!r}")
    if cfg.resblock.depth % 2:
        raise ConfigError("resblock.depth must be even (branch2 bottleneck is depth/2)")
    ms = cfg.schedule.milestones
    if list(ms) != sorted(set(ms)) or (ms and ms[-1] >= cfg.schedule.iterations):
        raise ConfigError("schedule.milestones must be strictly increasing and below iterations")
    return cfg
