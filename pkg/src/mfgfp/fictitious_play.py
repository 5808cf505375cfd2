"""Fictitious play drivers: exact, approximate and model-free."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from .best_response import (BestResponseResult, QLearningSchedule, QTable, corrupt_policy,
                            exact_best_response, policy_values, q_learning_best_response,
                            stationary_best_response)
from .core import MfgEnvironment
from .diagnostics import MixtureEvaluator, benchmark_errors
from .flows import (FeedbackPolicy, MixedPolicy, constant_flow, estimate_density,
                    flow_distance, format_float, fp_mixing_update, induced_flow,
                    stationary_occupancy, uniform, validate_distribution)

log = logging.getLogger(__name__)

FINITE_HORIZON = "finite_horizon"
STATIONARY = "stationary"
SOLVERS = ("exact", "perturbed", "q_learning")

#: full-scale trajectory budget of the model-free driver, divided by ``scale``
REFERENCE_TRAJECTORY_LENGTH = 1000
REFERENCE_NUM_TRAJECTORIES = 3000


@dataclass
class FpConfig:
    env: MfgEnvironment
    num_iterations: int
    mu0: Optional[np.ndarray] = None
    initial_flow: Optional[np.ndarray] = None
    solver: str = "exact"
    # perturbed solver: p_n = min(1, corruption_scale * max(n, 1) ** -corruption_power)
    corruption_scale: float = 1.0
    corruption_power: float = 2.0
    q_schedule: QLearningSchedule = field(default_factory=QLearningSchedule)
    warm_start: bool = True
    mode: str = FINITE_HORIZON
    seed: int = 0
    diagnostics: bool = True
    scale: float = 10.0

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.mode not in (FINITE_HORIZON, STATIONARY):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        S = self.env.num_states
        self.mu0 = validate_distribution(uniform(S) if self.mu0 is None else self.mu0, S, tol=1e-9)
        if self.initial_flow is None:
            if self.mode == STATIONARY:
                self.initial_flow = self.mu0.copy()
            else:
                self.initial_flow = constant_flow(self.mu0, self.env.horizon)
        self.initial_flow = np.asarray(self.initial_flow, dtype=float)
        expected = (S,) if self.mode == STATIONARY else (self.env.horizon + 1, S)
        if self.initial_flow.shape != expected:
            raise ValueError(f"initial flow has shape {self.initial_flow.shape}, expected {expected}")
        for row in np.atleast_2d(self.initial_flow):
            validate_distribution(row, S, tol=1e-9)

    def corruption(self, n: int) -> float:
        return min(1.0, self.corruption_scale * max(n, 1) ** -self.corruption_power)

    @property
    def trajectory_length(self) -> int:
        return max(1, round(REFERENCE_TRAJECTORY_LENGTH / self.scale))

    @property
    def num_trajectories(self) -> int:
        return max(1, round(REFERENCE_NUM_TRAJECTORIES / self.scale))


TRACE_COLUMNS = (
    "exploitability",
    "approx_exploitability",
    "learning_error",
    "d1_bar_step",
    "d1_hat_lag",
    "d1_star_hat",
    "l2_density",
    "l2_control",
)


@dataclass
class FpTrace:
    """Per-iteration metrics, iteration ``n = 1..N`` stored at index ``n - 1``.

    Absent values (for instance the lagged distance at the last iteration) are NaN.
    """

    columns: Dict[str, np.ndarray]

    def __getitem__(self, name) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __len__(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    def to_csv(self, path):
        names = [c for c in TRACE_COLUMNS if c in self.columns]
        names += [c for c in self.columns if c not in TRACE_COLUMNS]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration"] + names)
            for i in range(len(self)):
                writer.writerow([i + 1] + [format_float(self.columns[c][i]) for c in names])

    @classmethod
    def from_csv(cls, path) -> "FpTrace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "iteration":
            raise ValueError(f"{path} is not a trace file")
        names = rows[0][1:]
        data = {name: np.array([float(r[j + 1]) if r[j + 1] else np.nan for r in rows[1:]])
                for j, name in enumerate(names)}
        return cls(data)


class FpResult(NamedTuple):
    flow: np.ndarray
    policy: MixedPolicy
    trace: FpTrace


class _Recorder:
    def __init__(self, num_iterations: int, names):
        self.data = {name: np.full(num_iterations, np.nan) for name in names}

    def set(self, name, n, value):
        if name in self.data and 1 <= n <= len(self.data[name]):
            self.data[name][n - 1] = value

    def trace(self) -> FpTrace:
        return FpTrace(self.data)


def _finish(mu_bar, mixed: MixedPolicy, rec: _Recorder) -> FpResult:
    trace = rec.trace()
    # the approximate response may do worse than the mixture; flag it, do not clip it
    negative = int(np.sum(trace["approx_exploitability"] < -1e-12))
    if negative:
        log.info("approximate exploitability negative at %d iterations", negative)
    return FpResult(mu_bar, mixed, trace)


def _trace_names(diagnostics: bool, benchmark: bool):
    names = ["approx_exploitability", "d1_bar_step", "d1_hat_lag"]
    if diagnostics:
        names += ["exploitability", "learning_error", "d1_star_hat"]
    if benchmark:
        names += ["l2_density", "l2_control"]
    return [c for c in TRACE_COLUMNS if c in names]


def _control_at_start(env: MfgEnvironment, mixed: MixedPolicy) -> np.ndarray:
    values = mixed.mean_action_values(env)
    return values if values.ndim == 1 else values[0]


def _exact_response(env, mu_bar, mu0) -> BestResponseResult:
    if np.ndim(mu_bar) == 1:
        return stationary_best_response(env, mu_bar, mu0)
    return exact_best_response(env, mu_bar, mu0)


def _policy_value(env, policy, mu_bar, mu0) -> float:
    return float(mu0 @ policy_values(env, policy, mu_bar))


def _induced(env, policy: FeedbackPolicy, mu0, mu_bar):
    if policy.stationary:
        return stationary_occupancy(env, policy, mu0)
    return induced_flow(env, policy, mu0, mu_bar)


def _fp_loop(config: FpConfig, respond, exact_solver: bool) -> FpResult:
    """Shared driver for the exact and approximate schemes.

    Iteration ``n = 0..N`` computes the responses to ``mu_bar^(n)``; metrics of
    iteration ``n >= 1`` are recorded before the mixture absorbs the response.
    The response at ``n = N`` is only used for the final metrics.
    """
    env, mu0, N = config.env, config.mu0, config.num_iterations
    grid = env.state_grid
    diagnostics = config.diagnostics or exact_solver
    rec = _Recorder(N, _trace_names(diagnostics, env.is_benchmark))
    evaluator = MixtureEvaluator(env, mu0)
    mu_bar = config.initial_flow.copy()
    mixed: Optional[MixedPolicy] = None
    prev_hat_flow = None

    for n in range(N + 1):
        if exact_solver:
            exact = _exact_response(env, mu_bar, mu0)
            hat = exact
        else:
            exact = _exact_response(env, mu_bar, mu0) if diagnostics else None
            hat = respond(mu_bar, n)
        if n >= 2:
            rec.set("d1_hat_lag", n - 1, flow_distance(prev_hat_flow, hat.flow, grid))
        prev_hat_flow = hat.flow

        if n >= 1:
            j_bar = evaluator.value(mu_bar)
            j_hat = _policy_value(env, hat.policy, mu_bar, mu0)
            rec.set("approx_exploitability", n, j_hat - j_bar)
            if exact is not None:
                j_star = j_hat if exact is hat else _policy_value(env, exact.policy, mu_bar, mu0)
                rec.set("exploitability", n, j_star - j_bar)
                rec.set("learning_error", n, j_star - j_hat)
                rec.set("d1_star_hat", n, 0.0 if exact is hat
                        else flow_distance(exact.flow, hat.flow, grid))
            if env.is_benchmark:
                l2d, l2c = benchmark_errors(mu_bar, _control_at_start(env, mixed), grid)
                rec.set("l2_density", n, l2d)
                rec.set("l2_control", n, l2c)

        mu_next = fp_mixing_update(mu_bar, hat.flow, n)
        if n >= 1:
            rec.set("d1_bar_step", n, flow_distance(mu_bar, mu_next, grid))
        if n == N:
            break
        if mixed is None:
            mixed = MixedPolicy([hat.policy], [hat.flow])
        else:
            mixed.append(hat.policy, hat.flow)
        evaluator.add(hat.policy)
        mu_bar = mu_next
        log.debug("iteration %d done", n + 1)

    return _finish(mu_bar, mixed, rec)


def run_exact_fp(config: FpConfig) -> FpResult:
    """Fictitious play with exact best responses."""
    if config.solver != "exact":
        raise ValueError("run_exact_fp needs solver='exact'")
    return _fp_loop(config, None, exact_solver=True)


def _make_responder(config: FpConfig):
    env, mu0 = config.env, config.mu0
    rng = np.random.default_rng(config.seed)
    if config.solver == "exact":
        return lambda mu_bar, n: _exact_response(env, mu_bar, mu0)
    if config.solver == "perturbed":
        def respond(mu_bar, n):
            exact = _exact_response(env, mu_bar, mu0)
            policy = corrupt_policy(exact.policy, env.num_actions, config.corruption(n), rng)
            return BestResponseResult(policy, policy_values(env, policy, mu_bar),
                                      _induced(env, policy, mu0, mu_bar))
        return respond
    state = {"table": None}

    def respond(mu_bar, n):
        table = state["table"]
        if table is not None and not config.warm_start:
            table = None
        elif table is not None:
            table.visit_counts[:] = 0
        result = q_learning_best_response(env, mu_bar, mu0, config.q_schedule, rng, table)
        state["table"] = result.qtable
        return result
    return respond


def run_approximate_fp(config: FpConfig) -> FpResult:
    """Fictitious play with an approximate best-response solver.

    With ``diagnostics`` the exact response is computed alongside to record
    the learning error and the distance between exact and approximate flows.
    """
    respond = _make_responder(config)
    return _fp_loop(config, respond, exact_solver=False)


# --------------------------------------------------------------------------
# Model-free driver


@dataclass
class TrajectoryBuffer:
    """States visited by all rollouts so far, stored as cell indices."""

    num_cells: int
    chunks: List[np.ndarray] = field(default_factory=list)

    def add(self, states: np.ndarray):
        self.chunks.append(np.asarray(states, dtype=np.int64).ravel())

    def __len__(self):
        return int(sum(c.size for c in self.chunks))

    def coordinates(self) -> np.ndarray:
        return np.concatenate(self.chunks) / self.num_cells


def rollout_states(env: MfgEnvironment, policy: FeedbackPolicy, mu0, num_trajectories: int,
                   length: int, rng: np.random.Generator) -> np.ndarray:
    """Simulate a stationary policy from ``mu0``; returns ``(num_trajectories, length)`` cells."""
    S = env.num_states
    cdf = np.cumsum(env.kernel, axis=2)
    cdf[:, :, -1] = 1.0
    mu0_cdf = np.cumsum(mu0)
    mu0_cdf[-1] = 1.0
    x = np.minimum(np.searchsorted(mu0_cdf, rng.random(num_trajectories), side="right"), S - 1)
    out = np.empty((num_trajectories, length), dtype=np.int64)
    for t in range(length):
        out[:, t] = x
        rows = cdf[policy.action_index[x], x]
        u = rng.random(num_trajectories)
        x = np.minimum((rows <= u[:, None]).sum(axis=1), S - 1)
    return out


def run_modelfree_fp(config: FpConfig) -> FpResult:
    """Model-free fictitious play on the stationary problem.

    Each iteration learns a response with Q-learning against the current
    density estimate, rolls it out from ``mu0`` and re-estimates the population
    density from every state collected so far. The growing buffer weights all
    iterations equally, which is the fictitious-play average.
    """
    if config.solver != "q_learning":
        raise ValueError("run_modelfree_fp needs solver='q_learning'")
    if config.mode != STATIONARY:
        raise ValueError("run_modelfree_fp works in stationary mode")
    env, mu0, N = config.env, config.mu0, config.num_iterations
    grid = env.state_grid
    S = env.num_states
    learn_rng, rollout_rng = (np.random.default_rng(s)
                              for s in np.random.SeedSequence(config.seed).spawn(2))
    rec = _Recorder(N, _trace_names(config.diagnostics, env.is_benchmark) + ["buffer_size"])
    evaluator = MixtureEvaluator(env, mu0)
    buffer = TrajectoryBuffer(S)
    mu_bar = config.initial_flow.copy()
    mixed: Optional[MixedPolicy] = None
    table: Optional[QTable] = None
    prev_batch = None

    for n in range(N + 1):
        if table is not None:
            if config.warm_start:
                table.visit_counts[:] = 0
            else:
                table = None
        hat = q_learning_best_response(env, mu_bar, mu0, config.q_schedule, learn_rng, table)
        table = hat.qtable

        if n >= 1:
            j_bar = evaluator.value(mu_bar)
            j_hat = _policy_value(env, hat.policy, mu_bar, mu0)
            rec.set("approx_exploitability", n, j_hat - j_bar)
            if config.diagnostics:
                exact = stationary_best_response(env, mu_bar, mu0)
                j_star = _policy_value(env, exact.policy, mu_bar, mu0)
                rec.set("exploitability", n, j_star - j_bar)
                rec.set("learning_error", n, j_star - j_hat)
                occupancy = stationary_occupancy(env, hat.policy, mu0)
                exact_occupancy = stationary_occupancy(env, exact.policy, mu0)
                rec.set("d1_star_hat", n, flow_distance(exact_occupancy, occupancy, grid))
            if env.is_benchmark:
                l2d, l2c = benchmark_errors(mu_bar, _control_at_start(env, mixed), grid)
                rec.set("l2_density", n, l2d)
                rec.set("l2_control", n, l2c)
        if n == N:
            break

        states = rollout_states(env, hat.policy, mu0, config.num_trajectories,
                                config.trajectory_length, rollout_rng)
        batch = np.bincount(states.ravel(), minlength=S) / states.size
        if prev_batch is not None:
            rec.set("d1_hat_lag", n - 1, flow_distance(prev_batch, batch, grid))
        prev_batch = batch
        buffer.add(states)
        rec.set("buffer_size", n + 1, len(buffer))
        mu_next = estimate_density(buffer.coordinates(), S)
        if n >= 1:
            rec.set("d1_bar_step", n, flow_distance(mu_bar, mu_next, grid))
        if mixed is None:
            mixed = MixedPolicy([hat.policy], [batch])
        else:
            mixed.append(hat.policy, batch)
        evaluator.add(hat.policy)
        mu_bar = mu_next

    return _finish(mu_bar, mixed, rec)


def run(config: FpConfig, driver: str) -> FpResult:
    drivers = {"exact": run_exact_fp, "approximate": run_approximate_fp,
               "modelfree": run_modelfree_fp}
    return drivers[driver](config)
