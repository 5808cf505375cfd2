"""Distributions, mean field flows and policies on the state grid.

A distribution is a 1-D array of bin masses; a flow is a ``(T + 1, S)`` array
whose row ``t`` is the population distribution at time ``t``. Stationary
problems use a single distribution in place of a flow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import TORUS, MfgEnvironment, StateGrid

NORMALIZATION_TOL = 1e-12


def validate_distribution(masses, num_cells: Optional[int] = None, tol: float = NORMALIZATION_TOL):
    masses = np.asarray(masses, dtype=float)
    if masses.ndim != 1:
        raise ValueError("a distribution is a 1-D array of bin masses")
    if num_cells is not None and masses.shape[0] != num_cells:
        raise ValueError(f"distribution has {masses.shape[0]} bins, expected {num_cells}")
    if np.any(masses < 0):
        raise ValueError("distribution has negative mass")
    if abs(masses.sum() - 1.0) > tol:
        raise ValueError(f"distribution sums to {masses.sum()!r}")
    return masses


def uniform(num_cells: int) -> np.ndarray:
    return np.full(num_cells, 1.0 / num_cells)


def point_mass(num_cells: int, index: int) -> np.ndarray:
    out = np.zeros(num_cells)
    out[index] = 1.0
    return out


def constant_flow(mu0, horizon: int) -> np.ndarray:
    """The flow that sits at ``mu0`` for every ``t = 0..horizon``."""
    return np.tile(np.asarray(mu0, dtype=float), (horizon + 1, 1))


@dataclass(frozen=True)
class FeedbackPolicy:
    """Deterministic feedback policy given as action indices.

    ``action_index`` has shape ``(T, S)`` for a time-dependent policy or
    ``(S,)`` for a stationary one.
    """

    action_index: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.action_index, dtype=np.int64)
        if arr.ndim not in (1, 2):
            raise ValueError("action_index must be (T, S) or (S,)")
        if np.any(arr < 0):
            raise ValueError("negative action index")
        arr.setflags(write=False)
        object.__setattr__(self, "action_index", arr)

    @property
    def stationary(self) -> bool:
        return self.action_index.ndim == 1

    def at(self, t: int) -> np.ndarray:
        return self.action_index if self.stationary else self.action_index[t]

    def check(self, env: MfgEnvironment):
        if self.action_index.max(initial=0) >= env.num_actions:
            raise ValueError("action index out of range for the environment")
        S = env.num_states
        if self.stationary:
            if self.action_index.shape != (S,):
                raise ValueError("stationary policy must have one action per cell")
        elif self.action_index.shape != (env.horizon, S):
            raise ValueError(f"policy shape {self.action_index.shape} != {(env.horizon, S)}")

    def action_values(self, env: MfgEnvironment) -> np.ndarray:
        return env.action_grid.values[self.action_index]


@dataclass
class MixedPolicy:
    """Uniform mixture over feedback policies.

    Each agent draws one member at time 0 and follows it for the whole
    horizon, so the induced flow is the average of the member flows.
    ``flows`` optionally caches each member's induced flow.
    """

    members: List[FeedbackPolicy]
    flows: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a mixed policy needs at least one member")

    def __len__(self):
        return len(self.members)

    def append(self, policy: FeedbackPolicy, flow: Optional[np.ndarray] = None):
        self.members.append(policy)
        if flow is not None:
            self.flows.append(flow)

    def mean_action_values(self, env: MfgEnvironment) -> np.ndarray:
        """Average real-valued action over members (the control the mixture plays on average)."""
        total = sum(m.action_values(env) for m in self.members)
        return total / len(self.members)


def transition_matrix(env: MfgEnvironment, actions) -> np.ndarray:
    """``(S, S)`` transition matrix when cell ``x`` plays ``actions[x]``."""
    return env.kernel[actions, np.arange(env.num_states)]


def induced_flow(env: MfgEnvironment, policy: FeedbackPolicy, mu0, background=None) -> np.ndarray:
    """Population flow when every agent starts from ``mu0`` and plays ``policy``.

    ``background`` is the mean field the dynamics would depend on; with
    control-as-drift dynamics it is ignored, but its horizon is checked.
    """
    mu0 = validate_distribution(mu0, env.num_states)
    T = env.horizon
    if background is not None and np.ndim(background) == 2 and np.shape(background)[0] != T + 1:
        raise ValueError("background flow horizon does not match the environment")
    policy.check(env)
    flow = np.empty((T + 1, env.num_states))
    flow[0] = mu0
    for t in range(T):
        flow[t + 1] = flow[t] @ transition_matrix(env, policy.at(t))
    return flow


def induced_flow_mixed(env: MfgEnvironment, policy: MixedPolicy, mu0, background=None) -> np.ndarray:
    flows = [induced_flow(env, m, mu0, background) for m in policy.members]
    return np.sum(flows, axis=0) / len(flows)


def stationary_occupancy(env: MfgEnvironment, policy: FeedbackPolicy, mu0) -> np.ndarray:
    """Long-run occupancy of a stationary policy: ``(1/T) sum_{t<T} mu_t`` from ``mu0``.

    ``T`` is the environment horizon (the effective horizon in infinite-horizon
    mode); this is what pooling the states of length-``T`` trajectories estimates.
    """
    if not policy.stationary:
        raise ValueError("stationary occupancy needs a stationary policy")
    P = transition_matrix(env, policy.action_index)
    rho = validate_distribution(mu0, env.num_states)
    total = np.zeros_like(rho)
    for _ in range(env.horizon):
        total += rho
        rho = rho @ P
    return total / env.horizon


def fp_mixing_update(mu_bar, mu_hat, n: int) -> np.ndarray:
    """Fictitious-play average ``n/(n+1) mu_bar + 1/(n+1) mu_hat``."""
    if n < 0:
        raise ValueError("iteration index must be nonnegative")
    mu_bar = np.asarray(mu_bar, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if mu_bar.shape != mu_hat.shape:
        raise ValueError(f"shape mismatch {mu_bar.shape} vs {mu_hat.shape}")
    if n == 0:
        return mu_hat.copy()
    return (n * mu_bar + mu_hat) / (n + 1)


def wasserstein1(p, q, grid: StateGrid, circular: bool = False) -> float:
    """Exact Wasserstein-1 distance between two histograms on ``grid``.

    Uses the interval ground metric ``|x - y|`` by default; ``circular=True``
    switches to the geodesic metric of the torus.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.shape != (grid.num_points,):
        raise ValueError("histograms must live on the same grid")
    diff = np.cumsum(p - q)
    if circular:
        if grid.topology != TORUS:
            raise ValueError("circular Wasserstein needs a torus grid")
        diff = diff - np.median(diff)
        return float(grid.cell_width * np.sum(np.abs(diff)))
    return float(grid.cell_width * np.sum(np.abs(diff[:-1])))


def flow_distance(flow_a, flow_b, grid: StateGrid, circular: bool = False) -> float:
    """Sum over time of the per-time Wasserstein-1 distances."""
    a = np.atleast_2d(np.asarray(flow_a, dtype=float))
    b = np.atleast_2d(np.asarray(flow_b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {a.shape} vs {b.shape}")
    diff = np.cumsum(a - b, axis=1)
    if circular:
        if grid.topology != TORUS:
            raise ValueError("circular Wasserstein needs a torus grid")
        diff = diff - np.median(diff, axis=1, keepdims=True)
    else:
        diff = diff[:, :-1]
    per_time = grid.cell_width * np.sum(np.abs(diff), axis=1)
    return float(np.sum(per_time))


def estimate_density(samples, num_bins: int) -> np.ndarray:
    """Histogram of samples on the unit torus with ``num_bins`` cells.

    Sample ``x`` falls in the cell of its nearest grid point ``i / num_bins``.
    The empirical frequencies are the exact minimizer of the classification
    cross-entropy over bin probabilities.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("cannot estimate a density from an empty sample")
    if np.any(samples < 0) or np.any(samples >= 1) or not np.all(np.isfinite(samples)):
        raise ValueError("samples must lie in [0, 1)")
    idx = StateGrid(num_bins).locate(samples)
    counts = np.bincount(idx, minlength=num_bins)
    return counts / samples.size


def benchmark_density(flow_or_dist) -> np.ndarray:
    """Bin masses used for benchmark comparisons.

    A flow is reduced to its time-averaged occupancy over ``t = 0..T-1``
    (the times at which rewards accrue); a distribution is returned as is.
    """
    arr = np.asarray(flow_or_dist, dtype=float)
    if arr.ndim == 1:
        return arr
    if arr.shape[0] == 1:
        return arr[0]
    return arr[:-1].mean(axis=0)


def write_flow_csv(path, flow, grid: StateGrid):
    """One row per time index, one column per cell, header holds cell coordinates."""
    flow = np.atleast_2d(np.asarray(flow, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [repr(float(x)) for x in grid.coordinates])
        for t, row in enumerate(flow):
            writer.writerow([t] + [format_float(v) for v in row])


def read_flow_csv(path) -> tuple:
    """Return ``(coordinates, flow)`` from a flow CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    coords = np.array([float(x) for x in rows[0][1:]])
    flow = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return coords, flow


def format_float(value: float) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return format(float(value), ".17g")


def running_mean(flows: Sequence[np.ndarray]) -> np.ndarray:
    return np.sum(flows, axis=0) / len(flows)
