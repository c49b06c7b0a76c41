"""Run configuration: nested dataclasses loaded strictly from JSON."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .agents import AgentConfig
from .dwm import DwmConfig
from .onestep import OneStepConfig

__all__ = ["ConfigError", "DataConfig", "EvalConfig", "SweepConfig", "PathsConfig", "RunConfig",
           "load_config", "apply_override", "from_dict"]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    env: str = "pointmass"
    tier: str = "medium"
    episodes: int = 100
    seed: int = 0
    gamma: float = 0.99
    rtg_mode: str = "episode"


@dataclass
class EvalConfig:
    g_eval: float = 1.0
    n_windows: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    episodes: int = 10
    r_infer: list = field(default_factory=lambda: [0.2, 0.5, 1.0])


@dataclass
class SweepConfig:
    H: list = field(default_factory=lambda: [1, 3, 5, 7])
    models: list = field(default_factory=lambda: ["onestep", "dwm"])
    g_eval: list = field(default_factory=lambda: [0.6, 0.8, 1.0, 1.1])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train_agents: bool = True


@dataclass
class PathsConfig:
    dataset: str | None = None
    dwm: str | None = None
    onestep: str | None = None
    policy: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: str = "dwm"
    data: DataConfig = field(default_factory=DataConfig)
    dwm: DwmConfig = field(default_factory=DwmConfig)
    onestep: OneStepConfig = field(default_factory=OneStepConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.model not in ("dwm", "onestep"):
            raise ValueError(f"model must be 'dwm' or 'onestep', got {self.model!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            try:
                return _check_type(value, arg, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: {value!r} does not match {tp}")
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null")
        return None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys by full path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        sub = f"{path}{name}"
        if is_dataclass(tp):
            kwargs[name] = from_dict(tp, value, sub + ".")
        else:
            kwargs[name] = _check_type(value, tp, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path.rstrip('.') or '<root>'}: {e}") from None


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: dict, spec: str) -> dict:
    """Set ``a.b.c=value`` in a nested dict; values are parsed as JSON when possible."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, raw = spec.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from None
    for ov in overrides:
        apply_override(data, ov)
    cfg = from_dict(RunConfig, data)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg
