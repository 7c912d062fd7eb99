"""Flat ``key = value`` run configuration with dotted section keys.

::

    # comments run to end of line
    model.num_classes = 3
    model.global_channels = 24, 48, 96, 192
    train.lr = 0.001
    augment.hflip_prob = 0.5
    run.folds = 5
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

from .data import AugmentConfig
from .model import EDUNetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunOptions:
    folds: int = 1
    fold: int = 0
    dataset: str = "data"
    pooled_metrics: bool = False

    def __post_init__(self):
        if self.folds < 1:
            raise ValueError("run.folds must be >= 1")
        if not 0 <= self.fold < self.folds:
            raise ValueError(f"run.fold must be in [0, {self.folds}), got {self.fold}")


@dataclass
class RunConfig:
    model: EDUNetConfig = field(default_factory=EDUNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    run: RunOptions = field(default_factory=RunOptions)


SECTIONS = {"model": EDUNetConfig, "train": TrainConfig, "augment": AugmentConfig, "run": RunOptions}


def _hints(cls) -> Dict[str, object]:
    return typing.get_type_hints(cls)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def coerce(text: str, hint):
    """Convert ``text`` to the annotated field type."""
    origin = typing.get_origin(hint)
    if origin is Union:
        if text.strip().lower() == "none":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is tuple:
        elem = typing.get_args(hint)[0]
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(coerce(p, elem) for p in parts)
    try:
        if hint is bool:
            return _parse_bool(text)
        if hint is int:
            return int(text.strip())
        if hint is float:
            return float(text.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {hint.__name__}") from exc
    return text.strip()


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def build(values: Dict[str, str]) -> RunConfig:
    """Construct a validated :class:`RunConfig`; unknown keys are errors."""
    per: Dict[str, dict] = {s: {} for s in SECTIONS}
    for key, text in values.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r} (sections: {', '.join(SECTIONS)})")
        hints = _hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        per[section][name] = coerce(text, hints[name])
    try:
        return RunConfig(**{s: SECTIONS[s](**kw) for s, kw in per.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    values: Dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_lines(text.splitlines(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        values[key] = value
    return build(values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Every field of every section, one ``key = value`` per line."""
    lines: List[str] = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))
