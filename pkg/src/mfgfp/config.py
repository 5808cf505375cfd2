"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, duplicate keys and malformed values are rejected.

Recognized keys (defaults in brackets)::

    benchmark         congestion                       [congestion]
    num_cells         state grid size                  [50]
    num_actions       action grid size                 [21]
    min_action        smallest drift                   [-4]
    max_action        largest drift                    [4]
    discount          discount factor                  [0.95]
    time_step         dt                               [0.05]
    noise_std         sigma                            [1.0]
    horizon           integer or "auto"                [auto]
    num_iterations    FP iterations N >= 1             [20]
    mode              finite_horizon | stationary      [finite_horizon]
    solver            exact | perturbed | q_learning   [exact]
    corruption_scale  p_n = scale * n ** -power        [1.0]
    corruption_power                                   [2.0]
    q_episodes        Q-learning episodes per response [50000]
    q_episode_length  stationary episode length        [100]
    q_explore_floor                                    [0.05]
    q_explore_power                                    [0.5]
    q_lr_scale                                         [1.0]
    q_lr_power                                         [0.7]
    warm_start        true | false                     [true]
    scale             desk-scale divisor               [10]
    seed              unsigned 64-bit integer          [0]
    diagnostics       on | off                         [on]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

from .best_response import QLearningSchedule
from .core import congestion_benchmark
from .fictitious_play import FINITE_HORIZON, SOLVERS, STATIONARY, FpConfig

BENCHMARKS = ("congestion",)
_TRUE = ("on", "true", "yes", "1")
_FALSE = ("off", "false", "no", "0")


class ConfigError(ValueError):
    pass


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


@dataclass
class RunSettings:
    benchmark: str = "congestion"
    num_cells: int = 50
    num_actions: int = 21
    min_action: float = -4.0
    max_action: float = 4.0
    discount: float = 0.95
    time_step: float = 0.05
    noise_std: float = 1.0
    horizon: Optional[int] = None
    num_iterations: int = 20
    mode: str = FINITE_HORIZON
    solver: str = "exact"
    corruption_scale: float = 1.0
    corruption_power: float = 2.0
    q_episodes: int = 50_000
    q_episode_length: int = 100
    q_explore_floor: float = 0.05
    q_explore_power: float = 0.5
    q_lr_scale: float = 1.0
    q_lr_power: float = 0.7
    warm_start: bool = True
    scale: float = 10.0
    seed: int = 0
    diagnostics: bool = True

    def validate(self):
        if self.num_iterations < 1:
            raise ConfigError("num_iterations must be ≥ 1")
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.mode not in (FINITE_HORIZON, STATIONARY):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be a positive integer or 'auto'")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["horizon"] = "auto" if self.horizon is None else self.horizon
        return out

    def build(self) -> FpConfig:
        self.validate()
        env = congestion_benchmark(self.num_cells, self.num_actions, self.min_action,
                                   self.max_action, self.discount, self.time_step,
                                   self.noise_std, self.horizon)
        schedule = QLearningSchedule(num_episodes=self.q_episodes,
                                     episode_length=self.q_episode_length,
                                     explore_floor=self.q_explore_floor,
                                     explore_power=self.q_explore_power,
                                     lr_scale=self.q_lr_scale, lr_power=self.q_lr_power)
        return FpConfig(env, self.num_iterations, solver=self.solver,
                        corruption_scale=self.corruption_scale,
                        corruption_power=self.corruption_power, q_schedule=schedule,
                        warm_start=self.warm_start, mode=self.mode, seed=self.seed,
                        diagnostics=self.diagnostics, scale=self.scale)


_TYPES = {f.name: f.type for f in fields(RunSettings)}


def _convert(key: str, text: str):
    kind = _TYPES[key]
    try:
        if key == "horizon":
            return None if text.lower() == "auto" else int(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            return parse_bool(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def parse_config(text: str) -> RunSettings:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value)
    return RunSettings(**values).validate()


def load_config(path) -> RunSettings:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
