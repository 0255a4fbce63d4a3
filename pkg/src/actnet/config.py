"""INI run configuration: one section per config dataclass.

Example::

    [train]
    mode = actnetformer
    epochs = 40

    [loss]
    tau_conf = 0.8

Unknown sections or keys are rejected so a typo cannot silently fall back
to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .augment import AugmentConfig
from .data import DatasetConfig
from .evaluation import EvalConfig
from .losses import LossConfig
from .models import ModelConfig
from .trainer import TrainConfig

SECTIONS = {
    "data": DatasetConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "eval": EvalConfig,
}
_NESTED = ("loss", "model", "augment", "eval")


class ValidationError(ValueError):
    """Bad configuration or inputs, detected before any output is written."""


@dataclasses.dataclass
class RunConfig:
    data: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.train.validate()
        except ValueError as exc:
            raise ValidationError(str(exc)) from None


def _scalar_fields(cls) -> dict[str, dataclasses.Field]:
    hints = typing.get_type_hints(cls)
    return {f.name: (f, hints[f.name]) for f in dataclasses.fields(cls) if f.name not in _NESTED}


def _parse(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if hint is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text.strip()
        if origin is tuple:
            inner = args[0]
            return tuple(_parse(p, inner, key) for p in text.split(",") if p.strip())
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ValidationError(f"config key {key!r}: unsupported type {hint}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _apply(obj, section: str, items: dict[str, str]):
    fields = _scalar_fields(type(obj))
    updates = {}
    for key, text in items.items():
        if key not in fields:
            raise ValidationError(f"unknown config key [{section}] {key}")
        updates[key] = _parse(text, fields[key][1], f"{section}.{key}")
    return dataclasses.replace(obj, **updates)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: {exc}") from None
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"{source}: unknown config sections {sorted(unknown)}")
    run = RunConfig()
    if cp.has_section("data"):
        run.data = _apply(run.data, "data", dict(cp.items("data")))
    train = run.train
    if cp.has_section("train"):
        train = _apply(train, "train", dict(cp.items("train")))
    for name in _NESTED:
        if cp.has_section(name):
            train = dataclasses.replace(train, **{name: _apply(getattr(train, name), name, dict(cp.items(name)))})
    run.train = train
    return run


def load_config(path) -> RunConfig:
    """Read and validate an INI file; ``None`` gives the defaults."""
    if path is None:
        run = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        run = parse_config(p.read_text(), str(p))
    run.validate()
    return run


def dump_config(run: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    objs = {"data": run.data, "train": run.train}
    objs.update({n: getattr(run.train, n) for n in _NESTED})
    for section, obj in objs.items():
        cp[section] = {k: _format(getattr(obj, k)) for k in _scalar_fields(type(obj))}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def set_value(run: RunConfig, dotted: str, text: str) -> RunConfig:
    """Override one ``section.key`` from its text form (used by sweeps and flags)."""
    if "." not in dotted:
        raise ValidationError(f"config key must look like section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ValidationError(f"unknown config section {section!r}")
    if section == "data":
        return dataclasses.replace(run, data=_apply(run.data, "data", {key: text}))
    if section == "train":
        return dataclasses.replace(run, train=_apply(run.train, "train", {key: text}))
    sub = _apply(getattr(run.train, section), section, {key: text})
    return dataclasses.replace(run, train=dataclasses.replace(run.train, **{section: sub}))
