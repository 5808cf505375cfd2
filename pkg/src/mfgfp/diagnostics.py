"""Policy evaluation, exploitability and the quantitative checks run on FP traces."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .best_response import exact_best_response, policy_values, stationary_best_response
from .core import MfgEnvironment, StateGrid, UnsupportedTopologyError, closed_form_equilibrium
from .flows import (FeedbackPolicy, MixedPolicy, benchmark_density, induced_flow,
                    stationary_occupancy, transition_matrix, validate_distribution)

log = logging.getLogger(__name__)

Policy = Union[FeedbackPolicy, MixedPolicy]

#: rounding allowance for quantities that are nonnegative in exact arithmetic
NEGATIVE_SLACK = 1e-12


def state_values(env: MfgEnvironment, policy: Policy, mu_bar) -> np.ndarray:
    """``J(x0, policy, mu_bar)`` for every starting cell.

    Mixed policies average their members' values.
    """
    if isinstance(policy, MixedPolicy):
        return sum(policy_values(env, m, mu_bar) for m in policy.members) / len(policy)
    return policy_values(env, policy, mu_bar)


def evaluate_policy(env: MfgEnvironment, policy: Policy, mu_bar, mu0) -> float:
    """Average reward ``E_{x0 ~ mu0} J(x0, policy, mu_bar)``."""
    mu0 = validate_distribution(mu0, env.num_states, tol=1e-9)
    return float(mu0 @ state_values(env, policy, mu_bar))


def learning_error(env: MfgEnvironment, pi_exact: FeedbackPolicy, pi_hat: FeedbackPolicy,
                   mu_bar, mu0) -> float:
    return evaluate_policy(env, pi_exact, mu_bar, mu0) - evaluate_policy(env, pi_hat, mu_bar, mu0)


def _best_response(env, mu_bar, mu0):
    if np.ndim(mu_bar) == 1:
        return stationary_best_response(env, mu_bar, mu0)
    return exact_best_response(env, mu_bar, mu0)


def _induced(env, member, mu0):
    if member.stationary:
        return stationary_occupancy(env, member, mu0)
    return induced_flow(env, member, mu0)


def exploitability(env: MfgEnvironment, mixed: MixedPolicy, mu_bar, mu0, check: bool = True):
    """Gain of the exact best response over the mixture against ``mu_bar``.

    Returns ``(e, pi_exact)``. With ``check`` the flow induced by the mixture
    is compared to ``mu_bar`` and a warning is logged when they differ.
    """
    if check:
        flows = mixed.flows or [_induced(env, m, mu0) for m in mixed.members]
        gap = np.max(np.abs(np.sum(flows, axis=0) / len(flows) - mu_bar))
        if gap > 1e-8:
            log.warning("mu_bar differs from the mixture's induced flow by %.3g", gap)
    br = _best_response(env, mu_bar, mu0)
    e = evaluate_policy(env, br.policy, mu_bar, mu0) - evaluate_policy(env, mixed, mu_bar, mu0)
    return e, br.policy


class MixtureEvaluator:
    """Incremental evaluation of a growing uniform mixture.

    The value of a deterministic policy is linear in the crowd reward:
    ``J(pi, mu) = c_pi + sum_t <w_pi[t], r_bar(mu_t)>`` with ``c_pi`` the
    discounted private reward and ``w_pi`` the discounted occupancy. Keeping
    running means of ``c`` and ``w`` makes the mixture value O(T S) per query.
    """

    def __init__(self, env: MfgEnvironment, mu0):
        self.env = env
        self.mu0 = validate_distribution(mu0, env.num_states, tol=1e-9)
        self.count = 0
        self._private = 0.0
        self._weights = None

    def _terms(self, policy: FeedbackPolicy):
        env, S = self.env, self.env.num_states
        cells = np.arange(S)
        if policy.stationary:
            P = transition_matrix(env, policy.action_index)
            w = np.linalg.solve(np.eye(S) - env.discount * P.T, self.mu0)
            c = float(w @ env.private_rewards[cells, policy.action_index])
            return c, w
        T = env.horizon
        w = np.empty((T, S))
        rho = self.mu0
        c = 0.0
        disc = 1.0
        for t in range(T):
            actions = policy.at(t)
            w[t] = disc * rho
            c += float(w[t] @ env.private_rewards[cells, actions])
            rho = rho @ transition_matrix(env, actions)
            disc *= env.discount
        return c, w

    def add(self, policy: FeedbackPolicy):
        c, w = self._terms(policy)
        self.count += 1
        if self._weights is None:
            self._private, self._weights = c, w
        else:
            k = self.count
            self._private += (c - self._private) / k
            self._weights = self._weights + (w - self._weights) / k

    def value(self, mu_bar) -> float:
        if self.count == 0:
            raise ValueError("empty mixture")
        mu_bar = np.asarray(mu_bar, dtype=float)
        if np.ndim(self._weights) == 1:
            crowd = self.env.crowd_rewards(mu_bar)
            return self._private + float(self._weights @ crowd)
        crowd = np.stack([self.env.crowd_rewards(mu_bar[t]) for t in range(self.env.horizon)])
        return self._private + float(np.sum(self._weights * crowd))


# --------------------------------------------------------------------------
# Nash certification


@dataclass(frozen=True)
class NashCertificate:
    epsilon: float
    delta: float
    iteration: Optional[int] = None
    method: str = "markov_from_e_n"


@dataclass(frozen=True)
class NashRejection:
    exploitability: float
    min_epsilon: float
    iteration: Optional[int] = None


def certify_nash(e_n: float, epsilon: float, iteration: Optional[int] = None):
    """Markov-inequality certificate: ``e_n <= eps**2`` gives an ``(eps, eps)`` equilibrium."""
    if e_n < -NEGATIVE_SLACK:
        raise ValueError("exploitability must be nonnegative")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    e_n = max(e_n, 0.0)
    if e_n <= epsilon**2:
        return NashCertificate(epsilon, epsilon, iteration)
    return NashRejection(e_n, math.sqrt(e_n), iteration)


def suboptimality_by_state(env: MfgEnvironment, mixed: MixedPolicy, mu_bar, mu0) -> np.ndarray:
    """``phi(x0) = J(x0, pi*, mu_bar) - J(x0, mixed, mu_bar)`` for every starting cell."""
    br = _best_response(env, mu_bar, mu0)
    return br.value_by_state - state_values(env, mixed, mu_bar)


def direct_measure(env: MfgEnvironment, mixed: MixedPolicy, mu_bar, mu0, epsilon: float) -> float:
    """``mu0``-mass of starting cells where the mixture is more than ``eps`` suboptimal."""
    phi = suboptimality_by_state(env, mixed, mu_bar, mu0)
    mu0 = validate_distribution(mu0, env.num_states, tol=1e-9)
    return float(mu0[phi >= epsilon].sum())


def certify_nash_direct(env: MfgEnvironment, mixed: MixedPolicy, mu_bar, mu0, epsilon: float,
                        iteration: Optional[int] = None):
    """Certificate from the measured suboptimality mass instead of the Markov bound."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mu0 = validate_distribution(mu0, env.num_states, tol=1e-9)
    phi = suboptimality_by_state(env, mixed, mu_bar, mu0)
    if mu0[phi >= epsilon].sum() <= epsilon:
        return NashCertificate(epsilon, epsilon, iteration, method="direct_measure")
    return NashRejection(float(mu0 @ phi), smallest_certified_epsilon(phi, mu0), iteration)


def smallest_certified_epsilon(phi, mu0) -> float:
    """Infimum of ``eps`` with ``mu0({phi >= eps}) <= eps``."""
    levels = np.unique(np.asarray(phi, dtype=float))[::-1]
    best = max(levels[0], 0.0)
    for k, v in enumerate(levels):
        mass = float(np.sum(mu0[phi >= v]))
        below = levels[k + 1] if k + 1 < levels.size else -np.inf
        if mass <= v:
            best = min(best, max(mass, below, 0.0))
    return best


# --------------------------------------------------------------------------
# Error propagation bounds


@dataclass
class BoundReport:
    """Both error-propagation bounds evaluated along a trace.

    ``rhs_average[n-1] = C1/n (1 + sum_{i<=n} d1(mu*_{i+1}, mu^_{i+1})) + (1/n) sum_{i<=n} l_i``
    and ``rhs_lagged[n-1] = l_n + C2/n (1 + sum_{i<=n} d1(mu^_{i+1}, mu^_{i+2})) +
    sum_{i<=n} (i+1)/n l_i``. The lagged distance at the last iteration is
    unknown and left out of the sum. Constants are fitted on the first
    ``fit_count`` iterations and tested on the rest.
    """

    iterations: np.ndarray
    lhs: np.ndarray
    rhs_average: np.ndarray
    rhs_lagged: np.ndarray
    c1: float
    c2: float
    fit_count: int
    holds_average: bool
    holds_lagged: bool

    @property
    def holds_on_holdout(self) -> bool:
        return self.holds_average and self.holds_lagged

    def to_columns(self) -> dict:
        """Per-iteration bound vectors, for appending to a trace table."""
        return {"bound_rhs_average": self.rhs_average, "bound_rhs_lagged": self.rhs_lagged}

    def to_text(self) -> str:
        n = len(self.lhs)
        lines = [
            "error propagation bounds",
            f"iterations: {n} (constants fitted on 1..{self.fit_count}, "
            f"holdout {self.fit_count + 1}..{n})",
            f"C1 = {self.c1:.12g}",
            f"C2 = {self.c2:.12g}",
            f"average bound holds on holdout: {self.holds_average}",
            f"lagged bound holds on holdout: {self.holds_lagged}",
            "average bound: e_n <= C1/n (1 + sum_i d1(mu*_(i+1), mu^_(i+1))) + (1/n) sum_i l_i",
            "lagged bound: e_n <= l_n + C2/n (1 + sum_i d1(mu^_(i+1), mu^_(i+2)))"
            " + sum_i (i+1)/n l_i",
            "the lagged distance d1(mu^_(N+1), mu^_(N+2)) is not available and left out",
        ]
        return "\n".join(lines) + "\n"


REQUIRED_TRACE_COLUMNS = ("exploitability", "learning_error", "d1_star_hat", "d1_hat_lag")


def _fit_constant(lhs, offset, slope, mask):
    ratios = (lhs[mask] - offset[mask]) / slope[mask]
    return max(0.0, float(np.max(ratios))) if ratios.size else 0.0


def error_bound_report(trace, fit_fraction: float = 0.5, slack: float = 1e-12) -> BoundReport:
    """Fit minimal bound constants on a prefix of the trace and test them on the rest."""
    missing = [c for c in REQUIRED_TRACE_COLUMNS if c not in trace.columns]
    if missing:
        raise ValueError(f"trace lacks diagnostic columns: {', '.join(missing)}")
    if not 0 < fit_fraction <= 1:
        raise ValueError("fit_fraction must lie in (0, 1]")
    e = np.asarray(trace["exploitability"], dtype=float)
    ell = np.asarray(trace["learning_error"], dtype=float)
    d_star = np.asarray(trace["d1_star_hat"], dtype=float)
    d_lag = np.nan_to_num(np.asarray(trace["d1_hat_lag"], dtype=float), nan=0.0)
    N = e.size
    n = np.arange(1, N + 1, dtype=float)

    slope_avg = (1.0 + np.cumsum(d_star)) / n
    offset_avg = np.cumsum(ell) / n
    slope_lag = (1.0 + np.cumsum(d_lag)) / n
    offset_lag = ell + np.cumsum((n + 1) * ell) / n

    fit_count = max(1, int(math.floor(fit_fraction * N)))
    fit = np.arange(N) < fit_count
    c1 = _fit_constant(e, offset_avg, slope_avg, fit)
    c2 = _fit_constant(e, offset_lag, slope_lag, fit)
    rhs_avg = c1 * slope_avg + offset_avg
    rhs_lag = c2 * slope_lag + offset_lag
    hold = ~fit
    tol = slack * np.maximum(1.0, np.abs(e))
    holds_avg = bool(np.all(e[hold] <= rhs_avg[hold] + tol[hold]))
    holds_lag = bool(np.all(e[hold] <= rhs_lag[hold] + tol[hold]))
    return BoundReport(n.astype(int), e, rhs_avg, rhs_lag, c1, c2, fit_count, holds_avg, holds_lag)


def averaging_inequality_check(phi: Sequence[float], lam: Sequence[float], tol: float = 1e-12) -> bool:
    """Check the averaging inequality for sequences indexed from 0.

    Hypothesis: ``(n+1) phi[n+1] - n phi[n] <= lam[n]`` for ``n >= 1``.
    Conclusion (asserted when the hypothesis holds):
    ``phi[n] <= phi[1]/n + (1/n) sum_{i=1}^{n-1} lam[i]`` for ``n >= 1``.
    Returns whether the hypothesis holds.
    """
    phi = np.asarray(phi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if phi.shape != lam.shape:
        raise ValueError("sequences must have equal length")
    if phi.size < 2:
        raise ValueError("sequences need at least two terms")
    n = np.arange(1, phi.size - 1)
    steps = (n + 1) * phi[2:] - n * phi[1:-1]
    scale = np.maximum(1.0, np.abs(lam[1:-1]))
    if not np.all(steps <= lam[1:-1] + tol * scale):
        return False
    m = np.arange(1, phi.size)
    partial = np.concatenate(([0.0], np.cumsum(lam[1:-1])))
    bound = (phi[1] + partial) / m
    slack = tol * np.maximum(1.0, np.abs(phi[1]) + np.cumsum(np.abs(np.r_[0.0, lam[1:-1]])))
    if not np.all(phi[1:] <= bound + slack):
        raise AssertionError("averaging inequality violated")
    return True


# --------------------------------------------------------------------------
# Benchmark errors


def benchmark_errors(density, control, grid: StateGrid):
    """L2 distances of a learned density and control to the closed-form equilibrium.

    ``density`` is a distribution or a flow (reduced to its time-averaged
    occupancy); ``control`` holds real-valued actions per cell. Both norms are
    Riemann sums weighted by the cell width.
    """
    try:
        a_star, mu_star = closed_form_equilibrium(grid)
    except UnsupportedTopologyError as exc:
        raise ValueError("benchmark errors need the unit-torus congestion benchmark") from exc
    h = grid.cell_width
    masses = benchmark_density(density)
    control = np.asarray(control, dtype=float)
    if masses.shape != (grid.num_points,) or control.shape != (grid.num_points,):
        raise ValueError("density and control must have one entry per grid cell")
    l2_density = math.sqrt(h * np.sum((masses / h - mu_star / h) ** 2))
    l2_control = math.sqrt(h * np.sum((control - a_star) ** 2))
    return l2_density, l2_control
