"""``key=value`` run configuration shared by the CLI commands."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .augment import AugmentConfig
from .preprocess import PreprocessConfig
from .tinynet import NetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 14
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_decay_at: float = 0.75
    seed: int = 0
    augment: bool = True


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentConfig = AugmentConfig()


_SECTIONS = ("net", "train", "preprocess", "augment")


def _owner(key):
    for section in _SECTIONS:
        cls = type(getattr(RunConfig(), section))
        for f in fields(cls):
            if f.name == key:
                return section, f
    raise ConfigError(f"unknown config key {key!r}")


def _coerce(f, raw, default):
    kind = type(default)
    if kind is bool:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"{f.name}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind.__name__}") from exc


def apply_overrides(cfg, values):
    """Return ``cfg`` with ``{key: value}`` applied; values may be strings."""
    parts = {s: getattr(cfg, s) for s in _SECTIONS}
    for key, raw in values.items():
        section, f = _owner(key)
        default = getattr(parts[section], key)
        val = _coerce(f, raw, default) if isinstance(raw, str) else raw
        try:
            parts[section] = replace(parts[section], **{key: val})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return RunConfig(**parts)


def parse_config_text(text):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
