"""Run configuration: one INI file with sections, plus dotted ``section.key=value`` overrides.

Defaults mirror the published scene (4 x 4 intersections, 3 km side, M=4,
N=2, B=50, learning rate 0.001, gamma 0.95, epsilon 0.01, beta 2, c1 -0.01,
c2 10). Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
import io
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .iese import IeseSpec
from .rewards import RewardConfig
from .road_network import GridSpec
from .traffic_sim import SimConfig

VARIANTS = ("gqrl_iese", "gqrl", "iese_dqn", "dqn")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (8, 8)
    kernel: int = 3
    d_att: int = 32
    d_out: int = 128
    head_hidden: int = 64
    coord_hidden: tuple[int, ...] = (128, 64)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "gqrl_iese"
    episodes: int = 100
    seed: int = 0
    lr: float = 0.001
    gamma: float = 0.95
    epsilon: float = 0.01
    eps_decay: bool = False
    eps_start: float = 1.0
    eps_decay_frac: float = 0.3
    replay_capacity: int = 10000
    batch_size: int = 32
    target_sync: int = 100
    memory_capacity: int = 10000
    coord_batch_size: int = 32
    # global L2 cap on each learning step's gradient (agents and scorer); 0 means pure SGD
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    eval_episodes: int = 20
    eval_seed: int = 1000
    eval_workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def variant(self) -> str:
        return self.train.variant

    @property
    def uses_iese(self) -> bool:
        return self.variant in ("gqrl_iese", "iese_dqn")

    @property
    def uses_coordinator(self) -> bool:
        return self.variant in ("gqrl_iese", "gqrl")

    def encoder_spec(self) -> IeseSpec:
        m = self.model
        return IeseSpec(2 * self.grid.W, self.grid.K, m.channels, m.kernel, m.d_att, m.d_out)

    def validate(self) -> None:
        self.grid.validate()
        self.sim.validate()
        self.reward.validate()
        t = self.train
        if t.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, got {t.variant!r}")
        if t.episodes < 0:
            raise ConfigError("train.episodes must be >= 0")
        if not 0 <= t.epsilon <= 1 or not 0 <= t.eps_start <= 1:
            raise ConfigError("train.epsilon and train.eps_start must lie in [0, 1]")
        if not 0 < t.eps_decay_frac <= 1:
            raise ConfigError("train.eps_decay_frac must lie in (0, 1]")
        if not 0 <= t.gamma <= 1:
            raise ConfigError("train.gamma must lie in [0, 1]")
        for key in ("lr", "replay_capacity", "batch_size", "target_sync", "memory_capacity", "coord_batch_size",
                    "eval_workers"):
            if not getattr(t, key) > 0:
                raise ConfigError(f"train.{key} must be positive")
        if t.grad_clip < 0:
            raise ConfigError("train.grad_clip must be >= 0 (0 disables clipping)")
        if t.batch_size > t.replay_capacity or t.coord_batch_size > t.memory_capacity:
            raise ConfigError("train.batch_size must not exceed the buffer capacity")


SECTIONS = {"grid": GridSpec, "sim": SimConfig, "reward": RewardConfig, "model": ModelConfig, "train": TrainConfig}


def _format_routes(routes) -> str:
    if routes is None:
        return "default"
    return "; ".join(" ".join(f"{i},{j}" for i, j in r) for r in routes)


def _parse_routes(text: str):
    text = text.strip()
    if text in ("", "default", "none"):
        return None
    routes = []
    for chunk in text.split(";"):
        corners = []
        for tok in chunk.split():
            i, j = tok.split(",")
            corners.append((int(i), int(j)))
        routes.append(tuple(corners))
    return tuple(routes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(section: str, key: str, default, text: str):
    where = f"{section}.{key}"
    if key == "evader_routes":
        try:
            return _parse_routes(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse routes {text!r}") from exc
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(","))
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from exc


def to_ini(config: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(config, section)
        parser[section] = {
            f.name: _format_routes(getattr(obj, f.name)) if f.name == "evader_routes" else _format(getattr(obj, f.name))
            for f in fields(obj)
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _apply(config: RunConfig, section: str, key: str, text: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(config, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    value = _parse(section, key, getattr(SECTIONS[section](), key), text)
    return replace(config, **{section: replace(obj, **{key: value})})


def parse_overrides(items: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for item in items:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.append((section, key, value))
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (grid.W)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser[section].items():
                config = _apply(config, section, key, value)
    for section, key, value in parse_overrides(overrides):
        config = _apply(config, section, key, value)
    config.validate()
    return config
