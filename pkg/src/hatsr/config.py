"""Run configuration: a JSON object with ``model``, ``train`` and ``paths`` sections.

Every key is optional; omitted keys keep the defaults of :class:`ModelConfig`,
:class:`TrainConfig` and :class:`PathsConfig`.  Unknown keys and values of
the wrong type are rejected with the dotted key path in the message.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class PathsConfig:
    train_hr: str | None = None  # directory of HR training images
    train_lr: str | None = None  # optional pre-degraded LR directory
    val_hr: str | None = None
    output: str = "runs"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "paths": PathsConfig}


def _check_value(key: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(key, value, inner[0])
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return [_check_value(f"{key}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _build(section: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key")
        kwargs[key] = _check_value(f"{section}.{key}", value, hints[key])
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{section}: {e}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    parts = {name: _build(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**parts)


def parse_config(source) -> RunConfig:
    """Build a validated :class:`RunConfig` from a path, JSON text or a dict."""
    if isinstance(source, dict):
        return config_from_dict(source)
    text = source
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as f:
            text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}


def serialize(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_model_config(path: str | None) -> ModelConfig:
    return parse_config(path).model if path else ModelConfig()

