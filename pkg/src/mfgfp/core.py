"""Grid mean field game environments.

The state space is a uniform grid on ``[0, L)`` (torus or interval), the action
space a uniform grid of drifts. Dynamics are ``x' = x + a * dt + sqrt(dt) * sigma * eps``
and the running reward splits into a private part ``r~(x, a)`` and a crowd part
``r_bar(x, mu)``.

Grid point ``i`` sits at ``i * L / S`` and owns the cell ``[x_i - h/2, x_i + h/2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.special import i0, ndtr

TORUS = "torus"
INTERVAL = "interval"

#: floor applied to densities before taking the log in the congestion reward
DENSITY_FLOOR = 1e-9
#: Gaussian increments are truncated at this many standard deviations
NOISE_TRUNCATION = 5.0


class UnsupportedTopologyError(ValueError):
    pass


@dataclass(frozen=True)
class StateGrid:
    num_points: int
    domain_length: float = 1.0
    topology: str = TORUS

    def __post_init__(self):
        if self.num_points < 2:
            raise ValueError("num_points must be >= 2")
        if self.domain_length <= 0:
            raise ValueError("domain_length must be positive")
        if self.topology not in (TORUS, INTERVAL):
            raise ValueError(f"unknown topology {self.topology!r}")

    @property
    def cell_width(self) -> float:
        return self.domain_length / self.num_points

    @cached_property
    def coordinates(self) -> np.ndarray:
        return np.arange(self.num_points) * self.cell_width

    def locate(self, coords) -> np.ndarray:
        """Index of the cell containing each coordinate (nearest grid point)."""
        idx = np.floor(np.asarray(coords, dtype=float) / self.cell_width + 0.5).astype(np.int64)
        if self.topology == TORUS:
            return np.mod(idx, self.num_points)
        return np.clip(idx, 0, self.num_points - 1)


@dataclass(frozen=True)
class ActionGrid:
    num_actions: int
    min_action: float
    max_action: float

    def __post_init__(self):
        if self.num_actions < 1:
            raise ValueError("num_actions must be >= 1")
        if self.min_action > self.max_action:
            raise ValueError("min_action must not exceed max_action")
        if self.num_actions == 1 and self.min_action != self.max_action:
            raise ValueError("a single action needs min_action == max_action")

    @cached_property
    def values(self) -> np.ndarray:
        return np.linspace(self.min_action, self.max_action, self.num_actions)

    @property
    def step(self) -> float:
        if self.num_actions == 1:
            return 0.0
        return (self.max_action - self.min_action) / (self.num_actions - 1)


def _zero_private(x, a):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a)))


def _zero_crowd(x, masses, cell_width):
    return np.zeros(np.shape(x))


@dataclass(frozen=True)
class RewardModel:
    """Running reward ``r(x, mu, a) = private(x, a) + crowd(x, mu)``.

    ``private`` is called with a column of state coordinates and a row of
    action values and must broadcast to a ``(S, A)`` array. ``crowd`` receives
    the state coordinates, the bin masses of ``mu`` and the cell width and
    returns one value per cell. ``crowd_bound`` bounds ``|crowd|`` uniformly.
    """

    private: Callable = _zero_private
    crowd: Callable = _zero_crowd
    crowd_bound: float = 0.0
    name: str = "custom"

    @classmethod
    def from_table(cls, table, crowd: Callable = _zero_crowd, crowd_bound: float = 0.0):
        """Private reward given directly as a ``(S, A)`` table."""
        table = np.array(table, dtype=float)
        table.setflags(write=False)

        def private(x, a):
            shape = np.broadcast_shapes(np.shape(x), np.shape(a))
            if shape != table.shape:
                raise ValueError(f"reward table has shape {table.shape}, grid needs {shape}")
            return table

        return cls(private=private, crowd=crowd, crowd_bound=crowd_bound, name="table")


def log_congestion(x, masses, cell_width, floor: float = DENSITY_FLOOR):
    """Crowd aversion ``-log(density)`` with densities floored at ``floor``."""
    density = np.asarray(masses, dtype=float) / cell_width
    return -np.log(np.maximum(density, floor))


def geographic_reward(x, a):
    s = np.sin(2 * np.pi * x)
    c = np.cos(2 * np.pi * x)
    return 2 * np.pi**2 * s - 2 * np.pi**2 * c**2 + 2 * s - 0.5 * np.abs(a) ** 2


def closed_form_control(x):
    return np.pi * np.cos(2 * np.pi * np.asarray(x, dtype=float))


def closed_form_density(x):
    """Ergodic density ``exp(2 sin 2 pi x) / Z`` on the unit torus.

    ``Z`` is the integral of ``exp(2 sin 2 pi y)`` over one period, i.e. ``I_0(2)``.
    """
    return np.exp(2 * np.sin(2 * np.pi * np.asarray(x, dtype=float))) / i0(2.0)


class KernelRow(NamedTuple):
    probs: np.ndarray
    clamped: bool


@dataclass(frozen=True)
class MfgEnvironment:
    state_grid: StateGrid
    action_grid: ActionGrid
    horizon: int
    discount: float = 1.0
    time_step: float = 1.0
    noise_std: float = 0.0
    reward: RewardModel = field(default_factory=RewardModel)
    infinite_horizon: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.time_step <= 0:
            raise ValueError("time_step must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.infinite_horizon and self.discount >= 1:
            raise ValueError("infinite-horizon mode requires discount < 1")

    @property
    def num_states(self) -> int:
        return self.state_grid.num_points

    @property
    def num_actions(self) -> int:
        return self.action_grid.num_actions

    @property
    def is_benchmark(self) -> bool:
        return self.name == "congestion"

    @cached_property
    def _kernel_and_flags(self):
        S, A = self.num_states, self.num_actions
        kernel = np.zeros((A, S, S))
        clamped = np.zeros((A, S), dtype=bool)
        for a in range(A):
            for i in range(S):
                kernel[a, i], clamped[a, i] = _kernel_row(self, self.state_grid.coordinates[i], a)
        kernel.setflags(write=False)
        clamped.setflags(write=False)
        return kernel, clamped

    @property
    def kernel(self) -> np.ndarray:
        """Transition tensor ``P[a, x, x']``."""
        return self._kernel_and_flags[0]

    @property
    def clamped(self) -> np.ndarray:
        return self._kernel_and_flags[1]

    @cached_property
    def private_rewards(self) -> np.ndarray:
        x = self.state_grid.coordinates[:, None]
        a = self.action_grid.values[None, :]
        table = np.broadcast_to(self.reward.private(x, a), (self.num_states, self.num_actions))
        table = np.array(table, dtype=float)
        table.setflags(write=False)
        return table

    def crowd_rewards(self, masses) -> np.ndarray:
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (self.num_states,):
            raise ValueError(f"distribution has {masses.shape}, grid has {self.num_states} cells")
        out = self.reward.crowd(self.state_grid.coordinates, masses, self.state_grid.cell_width)
        return np.broadcast_to(np.asarray(out, dtype=float), (self.num_states,))

    def reward_table(self, masses) -> np.ndarray:
        """``r(x, mu, a)`` for every cell and action, shape ``(S, A)``."""
        return self.private_rewards + self.crowd_rewards(masses)[:, None]

    @property
    def reward_bound(self) -> float:
        return float(np.max(np.abs(self.private_rewards))) + self.reward.crowd_bound


def effective_horizon(discount: float, reward_bound: float, tol: float = 1e-6) -> int:
    """Truncation horizon after which the discounted tail is below ``tol``."""
    if not 0 < discount < 1:
        raise ValueError("effective horizon needs discount in (0, 1)")
    if reward_bound <= 0:
        return 1
    t = math.log(tol * (1 - discount) / reward_bound) / math.log(discount)
    return max(1, math.ceil(t))


def _check_indices(env: MfgEnvironment, state_index: int, action_index: int):
    if not 0 <= state_index < env.num_states:
        raise IndexError(f"state index {state_index} out of range")
    if not 0 <= action_index < env.num_actions:
        raise IndexError(f"action index {action_index} out of range")


def _kernel_row(env: MfgEnvironment, x: float, action_index: int):
    grid = env.state_grid
    S, h = grid.num_points, grid.cell_width
    y = x + env.action_grid.values[action_index] * env.time_step
    probs = np.zeros(S)
    clamped = False

    if env.noise_std == 0:
        if grid.topology == INTERVAL:
            lo, hi = 0.0, (S - 1) * h
            clamped = not lo - 1e-12 <= y <= hi + 1e-12
            y = min(max(y, lo), hi)
        u = y / h
        k = math.floor(u)
        w = u - k
        if w < 1e-12:
            w = 0.0
        elif w > 1 - 1e-12:
            k, w = k + 1, 0.0
        if grid.topology == TORUS:
            probs[k % S] += 1 - w
            probs[(k + 1) % S] += w
        else:
            probs[min(k, S - 1)] += 1 - w
            if w > 0:
                probs[min(k + 1, S - 1)] += w
        return probs, clamped

    s = env.noise_std * math.sqrt(env.time_step)
    lo, hi = y - NOISE_TRUNCATION * s, y + NOISE_TRUNCATION * s
    m_lo = math.floor(lo / h + 0.5)
    m_hi = math.floor(hi / h + 0.5)
    cells = np.arange(m_lo, m_hi + 1)
    edges = np.clip((np.arange(m_lo, m_hi + 2) - 0.5) * h, lo, hi)
    mass = np.diff(ndtr((edges - y) / s))
    if grid.topology == TORUS:
        np.add.at(probs, np.mod(cells, S), mass)
    else:
        clamped = bool(m_lo < 0 or m_hi > S - 1)
        np.add.at(probs, np.clip(cells, 0, S - 1), mass)
    return probs / probs.sum(), clamped


def step_kernel(env: MfgEnvironment, state_index: int, action_index: int) -> KernelRow:
    """One-step transition distribution from a cell under an action."""
    _check_indices(env, state_index, action_index)
    return transition_from(env, env.state_grid.coordinates[state_index], action_index)


def transition_from(env: MfgEnvironment, x: float, action_index: int) -> KernelRow:
    """Transition distribution from an arbitrary coordinate ``x``."""
    if not 0 <= action_index < env.num_actions:
        raise IndexError(f"action index {action_index} out of range")
    if env.state_grid.topology == TORUS:
        x = math.fmod(x, env.state_grid.domain_length)
    probs, clamped = _kernel_row(env, x, action_index)
    return KernelRow(probs, clamped)


def reward_value(env: MfgEnvironment, state_index: int, action_index: int, masses) -> float:
    _check_indices(env, state_index, action_index)
    return float(env.private_rewards[state_index, action_index]
                 + env.crowd_rewards(masses)[state_index])


def closed_form_equilibrium(grid: StateGrid):
    """Control ``a*`` and bin masses ``mu*`` of the congestion benchmark on ``grid``."""
    if grid.topology != TORUS or grid.domain_length != 1.0:
        raise UnsupportedTopologyError("the closed-form equilibrium lives on the unit torus")
    x = grid.coordinates
    masses = closed_form_density(x) * grid.cell_width
    return closed_form_control(x), masses / masses.sum()


def check_monotonicity(crowd: Callable, m1, m2, grid: StateGrid) -> float:
    """Discrete Lasry-Lions pairing ``sum_x [r_bar(x, m1) - r_bar(x, m2)] (m1 - m2)(x)``.

    Strictly negative values for distinct ``m1, m2`` mean the crowd reward is
    monotone (crowd averse) on that pair.
    """
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if m1.shape != m2.shape or m1.shape != (grid.num_points,):
        raise ValueError("distributions must live on the same grid")
    x, h = grid.coordinates, grid.cell_width
    diff = np.asarray(crowd(x, m1, h), dtype=float) - np.asarray(crowd(x, m2, h), dtype=float)
    return float(np.sum(diff * (m1 - m2)))


CONGESTION_REWARD = RewardModel(
    private=geographic_reward,
    crowd=log_congestion,
    crowd_bound=-math.log(DENSITY_FLOOR),
    name="congestion",
)


def congestion_benchmark(
    num_cells: int = 50,
    num_actions: int = 21,
    min_action: float = -4.0,
    max_action: float = 4.0,
    discount: float = 0.95,
    time_step: float = 0.05,
    noise_std: float = 1.0,
    horizon: Optional[int] = None,
) -> MfgEnvironment:
    """Crowd congestion game on the unit torus with a closed-form ergodic solution.

    Without an explicit ``horizon`` the infinite-horizon discounted problem is
    truncated at its effective horizon.
    """
    grid = StateGrid(num_cells)
    actions = ActionGrid(num_actions, min_action, max_action)
    crowd_bound = max(-math.log(DENSITY_FLOOR), abs(math.log(grid.cell_width)))
    reward = RewardModel(geographic_reward, log_congestion, crowd_bound, "congestion")
    infinite = horizon is None
    if infinite:
        x = grid.coordinates[:, None]
        bound = np.max(np.abs(geographic_reward(x, actions.values[None, :]))) + crowd_bound
        horizon = effective_horizon(discount, float(bound))
    return MfgEnvironment(grid, actions, horizon, discount, time_step, noise_std, reward,
                          infinite_horizon=infinite, name="congestion")


def grid_mfg(
    num_cells: int,
    num_actions: int,
    min_action: float,
    max_action: float,
    horizon: int,
    reward: RewardModel,
    discount: float = 1.0,
    time_step: float = 1.0,
    noise_std: float = 0.0,
    topology: str = TORUS,
) -> MfgEnvironment:
    """Generic finite-horizon grid MFG with control-as-drift dynamics."""
    return MfgEnvironment(
        StateGrid(num_cells, 1.0, topology),
        ActionGrid(num_actions, min_action, max_action),
        horizon, discount, time_step, noise_std, reward,
    )
