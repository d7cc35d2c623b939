"""Experiment configuration: an INI-style file with typed, validated sections.

Every key must belong to a known section field; unknown sections or keys are
errors.  ``none`` spells an absent optional value.
"""

from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .recon_net import ReconConfig
from .seg_net import SegConfig
from .trainer import ItfsPolicy, TrainingConfig, WeightSchedule


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str | None = None
    test_manifest: str | None = None
    n_train: int = 200
    n_test: int = 50
    image_size: int = 64
    n_classes: int = 2
    n_ellipses: int = 4
    lesion_count: int = 2
    slices_per_volume: int = 10
    normalization: str = "min-max"
    seed: int = 0


@dataclass
class MaskSection:
    center_fraction: float = 0.08
    acceleration: float = 4.0
    seed: int = 0
    eval_seed: int = 1


@dataclass
class TrainingSection:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 1.0
    lr_decay_every: int = 10
    seg_loss: str = "dice"
    recon_reduction: str = "mean"
    recon_lr_scale: float = 1.0
    seed: int = 0


@dataclass
class OutputSection:
    run_dir: str = "run"
    checkpoint_every: int = 0


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    mask: MaskSection = field(default_factory=MaskSection)
    recon: ReconConfig = field(default_factory=ReconConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    schedule: WeightSchedule = field(default_factory=WeightSchedule)
    itfs: ItfsPolicy = field(default_factory=ItfsPolicy)
    output: OutputSection = field(default_factory=OutputSection)

    def training_config(self) -> TrainingConfig:
        t = self.training
        return TrainingConfig(
            epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lr_decay=t.lr_decay,
            lr_decay_every=t.lr_decay_every, seg_loss=t.seg_loss, recon_reduction=t.recon_reduction,
            recon_lr_scale=t.recon_lr_scale, seed=t.seed,
            center_fraction=self.mask.center_fraction, acceleration=self.mask.acceleration,
            mask_seed=self.mask.seed, checkpoint_every=self.output.checkpoint_every,
            schedule=self.schedule, itfs=self.itfs, recon=self.recon, seg=self.seg,
        )


def _parse_value(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse_value(text, args[0], where)
    if origin is tuple:
        parts = [p for p in text.strip("()[] ").split(",") if p.strip()]
        return tuple(_parse_value(p, a, where) for p, a in zip(parts, typing.get_args(hint)))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigError(f"{where}: unsupported type {hint}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    top = typing.get_type_hints(ExperimentConfig)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for f in fields(ExperimentConfig):
        cls = top[f.name]
        if not cp.has_section(f.name):
            sections[f.name] = cls()
            continue
        hints = typing.get_type_hints(cls)
        kw = {}
        for key, raw in cp.items(f.name):
            if key not in hints:
                raise ConfigError(f"unknown key {f.name}.{key}")
            kw[key] = _parse_value(raw, hints[key], f"{f.name}.{key}")
        try:
            sections[f.name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{f.name}]: {exc}") from None
    return ExperimentConfig(**sections)


def format_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for f in fields(ExperimentConfig):
        sec = getattr(cfg, f.name)
        cp[f.name] = {g.name: _format_value(getattr(sec, g.name)) for g in fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
