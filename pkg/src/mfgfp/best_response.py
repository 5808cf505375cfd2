"""Best responses against a frozen mean field.

Exact responses come from backward induction (finite horizon) or value
iteration (stationary, discounted). Approximate responses either corrupt the
exact one on purpose or learn it with tabular Q-learning from simulated
transitions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numba
import numpy as np

from .core import MfgEnvironment
from .flows import (FeedbackPolicy, induced_flow, stationary_occupancy, transition_matrix,
                    validate_distribution)

VI_TOL = 1e-8


@dataclass
class BestResponseResult:
    policy: FeedbackPolicy
    value_by_state: np.ndarray
    flow: np.ndarray
    values: Optional[np.ndarray] = None
    qtable: Optional["QTable"] = None


def _check_flow(env: MfgEnvironment, mu_bar) -> np.ndarray:
    mu_bar = np.asarray(mu_bar, dtype=float)
    if mu_bar.shape != (env.horizon + 1, env.num_states):
        raise ValueError(f"flow shape {mu_bar.shape} does not cover horizon {env.horizon} "
                         f"on {env.num_states} cells")
    return mu_bar


def backward_induction(env: MfgEnvironment, mu_bar):
    """Optimal values ``V[t, x]`` (``V[T] = 0``) and greedy actions ``[t, x]``."""
    mu_bar = _check_flow(env, mu_bar)
    T, S = env.horizon, env.num_states
    V = np.zeros((T + 1, S))
    actions = np.zeros((T, S), dtype=np.int64)
    P = env.kernel
    for t in range(T - 1, -1, -1):
        q = env.reward_table(mu_bar[t]) + env.discount * (P @ V[t + 1]).T
        actions[t] = np.argmax(q, axis=1)
        V[t] = q[np.arange(S), actions[t]]
    return V, actions


def exact_best_response(env: MfgEnvironment, mu_bar, mu0) -> BestResponseResult:
    """Best response to the flow ``mu_bar`` by backward dynamic programming.

    Ties between actions go to the lowest action index.
    """
    V, actions = backward_induction(env, mu_bar)
    policy = FeedbackPolicy(actions)
    flow = induced_flow(env, policy, mu0, mu_bar)
    return BestResponseResult(policy, V[0].copy(), flow, values=V)


def _stationary_policy_value(env: MfgEnvironment, rewards, actions) -> np.ndarray:
    S = env.num_states
    P = transition_matrix(env, actions)
    r = rewards[np.arange(S), actions]
    return np.linalg.solve(np.eye(S) - env.discount * P, r)


def value_iteration_stationary(env: MfgEnvironment, mu_stat, mu0=None, tol: float = VI_TOL,
                               max_sweeps: int = 100_000):
    """Optimal stationary policy against a fixed population distribution.

    Iterates the discounted Bellman operator from ``V = 0`` until the
    sup-norm change drops to ``tol``. Returns the result and the list of
    successive sup-norm changes.
    """
    if env.discount >= 1:
        raise ValueError("stationary value iteration needs discount < 1")
    mu_stat = validate_distribution(mu_stat, env.num_states, tol=1e-9)
    rewards = env.reward_table(mu_stat)
    P = env.kernel
    V = np.zeros(env.num_states)
    deltas: List[float] = []
    for _ in range(max_sweeps):
        q = rewards + env.discount * (P @ V).T
        V_new = q.max(axis=1)
        delta = float(np.max(np.abs(V_new - V)))
        deltas.append(delta)
        V = V_new
        if delta <= tol:
            break
    q = rewards + env.discount * (P @ V).T
    actions = np.argmax(q, axis=1)
    policy = FeedbackPolicy(actions)
    flow = stationary_occupancy(env, policy, mu0 if mu0 is not None else mu_stat)
    return BestResponseResult(policy, V, flow), deltas


def stationary_best_response(env: MfgEnvironment, mu_stat, mu0) -> BestResponseResult:
    result, _ = value_iteration_stationary(env, mu_stat, mu0)
    return result


def corrupt_policy(policy: FeedbackPolicy, num_actions: int, probability: float,
                   rng: np.random.Generator) -> FeedbackPolicy:
    """Replace each entry by a uniform random action with the given probability."""
    if not 0 <= probability <= 1:
        raise ValueError("corruption probability must lie in [0, 1]")
    actions = np.array(policy.action_index)
    mask = rng.random(actions.shape) < probability
    random_actions = rng.integers(num_actions, size=actions.shape)
    actions[mask] = random_actions[mask]
    return FeedbackPolicy(actions)


def perturbed_best_response(env: MfgEnvironment, mu_bar, mu0, probability: float,
                            rng: np.random.Generator) -> BestResponseResult:
    """Exact best response with each ``(t, x)`` action randomized with probability ``p``."""
    if not 0 <= probability <= 1:
        raise ValueError("corruption probability must lie in [0, 1]")
    if np.ndim(mu_bar) == 1:
        exact = stationary_best_response(env, mu_bar, mu0)
    else:
        exact = exact_best_response(env, mu_bar, mu0)
    policy = corrupt_policy(exact.policy, env.num_actions, probability, rng)
    if policy.stationary:
        flow = stationary_occupancy(env, policy, mu0)
        value = _stationary_policy_value(env, env.reward_table(mu_bar), policy.action_index)
    else:
        flow = induced_flow(env, policy, mu0, mu_bar)
        value = policy_values(env, policy, mu_bar)
    return BestResponseResult(policy, value, flow)


def policy_values(env: MfgEnvironment, policy: FeedbackPolicy, mu_bar) -> np.ndarray:
    """Per-state value ``J(x0, pi, mu_bar)`` of a deterministic policy."""
    if policy.stationary and np.ndim(mu_bar) == 1:
        policy.check(env)
        return _stationary_policy_value(env, env.reward_table(mu_bar), policy.action_index)
    mu_bar = _check_flow(env, mu_bar)
    policy.check(env)
    S = env.num_states
    V = np.zeros(S)
    for t in range(env.horizon - 1, -1, -1):
        actions = policy.at(t)
        r = env.reward_table(mu_bar[t])[np.arange(S), actions]
        V = r + env.discount * (transition_matrix(env, actions) @ V)
    return V


# --------------------------------------------------------------------------
# Tabular Q-learning


@dataclass(frozen=True)
class QLearningSchedule:
    """Episode budget, exploration and step-size schedules.

    Exploration at episode ``k`` (1-based) is ``max(explore_floor, k ** -explore_power)``;
    the step size for a pair visited ``c`` times before is
    ``lr_scale / (1 + c) ** lr_power``. ``episode_length`` applies to
    stationary problems (finite-horizon episodes last the horizon).
    """

    num_episodes: int = 50_000
    episode_length: int = 100
    explore_floor: float = 0.05
    explore_power: float = 0.5
    lr_scale: float = 1.0
    lr_power: float = 0.7
    chunk_episodes: int = 2_000

    def __post_init__(self):
        if self.num_episodes < 1:
            raise ValueError("num_episodes must be >= 1")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if not 0 <= self.explore_floor <= 1:
            raise ValueError("explore_floor must lie in [0, 1]")

    def exploration(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        return np.maximum(self.explore_floor, k ** -self.explore_power)

    def learning_rate(self, count) -> np.ndarray:
        return self.lr_scale / (1.0 + np.asarray(count, dtype=float)) ** self.lr_power


@dataclass
class QTable:
    """Q-values ``q[t, x, a]``; stationary tables have a single time slice.

    Finite-horizon tables carry an extra terminal slice ``q[T] = 0``.
    """

    q: np.ndarray
    visit_counts: np.ndarray
    stationary: bool
    episodes_run: int = 0

    @classmethod
    def zeros(cls, env: MfgEnvironment, stationary: bool) -> "QTable":
        slices = 1 if stationary else env.horizon + 1
        shape = (slices, env.num_states, env.num_actions)
        return cls(np.zeros(shape), np.zeros(shape, dtype=np.int64), stationary)

    def greedy(self) -> FeedbackPolicy:
        if self.stationary:
            return FeedbackPolicy(np.argmax(self.q[0], axis=1))
        return FeedbackPolicy(np.argmax(self.q[:-1], axis=2))

    def copy(self) -> "QTable":
        return QTable(self.q.copy(), self.visit_counts.copy(), self.stationary, self.episodes_run)


@numba.njit(cache=True)
def _q_episodes(q, counts, cdf, rewards, stationary, gamma, starts, epsilons, u_explore,
                random_actions, u_next, lr_scale, lr_power):
    n_ep, length = u_explore.shape
    S = cdf.shape[1]
    n_act = cdf.shape[0]
    for e in range(n_ep):
        x = starts[e]
        eps = epsilons[e]
        for step in range(length):
            t = 0 if stationary else step
            if u_explore[e, step] < eps:
                a = random_actions[e, step]
            else:
                a = 0
                best = q[t, x, 0]
                for b in range(1, n_act):
                    if q[t, x, b] > best:
                        best = q[t, x, b]
                        a = b
            y = np.searchsorted(cdf[a, x], u_next[e, step], side="right")
            if y >= S:
                y = S - 1
            t_next = 0 if stationary else step + 1
            r = rewards[t, x, a]
            nxt = q[t_next, y, 0]
            for b in range(1, n_act):
                if q[t_next, y, b] > nxt:
                    nxt = q[t_next, y, b]
            c = counts[t, x, a]
            alpha = lr_scale / (1.0 + c) ** lr_power
            q[t, x, a] += alpha * (r + gamma * nxt - q[t, x, a])
            counts[t, x, a] = c + 1
            x = y


def run_q_learning(env: MfgEnvironment, mu_bar, mu0, schedule: QLearningSchedule,
                   rng: np.random.Generator, table: Optional[QTable] = None) -> QTable:
    """Episodic Q-learning on the MDP obtained by freezing the mean field at ``mu_bar``.

    ``mu_bar`` is a flow for finite-horizon problems or a single distribution
    for stationary ones. Episodes start from ``mu0``. ``table`` is updated in
    place when given (warm start).
    """
    stationary = np.ndim(mu_bar) == 1
    mu0 = validate_distribution(mu0, env.num_states, tol=1e-9)
    if stationary:
        if env.discount >= 1:
            raise ValueError("stationary Q-learning needs discount < 1")
        rewards = env.reward_table(mu_bar)[None]
        length = schedule.episode_length
    else:
        mu_bar = _check_flow(env, mu_bar)
        rewards = np.stack([env.reward_table(mu_bar[t]) for t in range(env.horizon)])
        length = env.horizon
    if table is None:
        table = QTable.zeros(env, stationary)
    elif table.stationary != stationary:
        raise ValueError("Q-table and mean field disagree on stationarity")
    cdf = np.cumsum(env.kernel, axis=2)
    cdf[:, :, -1] = 1.0
    mu0_cdf = np.cumsum(mu0)
    mu0_cdf[-1] = 1.0

    done = 0
    while done < schedule.num_episodes:
        n = min(schedule.chunk_episodes, schedule.num_episodes - done)
        k = table.episodes_run + done + 1 + np.arange(n)
        starts = np.minimum(np.searchsorted(mu0_cdf, rng.random(n), side="right"),
                            env.num_states - 1).astype(np.int64)
        u_explore = rng.random((n, length))
        random_actions = rng.integers(env.num_actions, size=(n, length))
        u_next = rng.random((n, length))
        _q_episodes(table.q, table.visit_counts, cdf, rewards, stationary, env.discount,
                    starts, schedule.exploration(k), u_explore, random_actions, u_next,
                    schedule.lr_scale, schedule.lr_power)
        done += n
    table.episodes_run += schedule.num_episodes
    return table


def q_learning_best_response(env: MfgEnvironment, mu_bar, mu0, schedule: QLearningSchedule,
                             rng: np.random.Generator,
                             table: Optional[QTable] = None) -> BestResponseResult:
    """Greedy policy of a Q-table learned against the frozen mean field ``mu_bar``.

    ``value_by_state`` holds the learner's own estimate ``max_a Q_0(x, a)``.
    """
    table = run_q_learning(env, mu_bar, mu0, schedule, rng, table)
    policy = table.greedy()
    if policy.stationary:
        flow = stationary_occupancy(env, policy, mu0)
    else:
        flow = induced_flow(env, policy, mu0, mu_bar)
    return BestResponseResult(policy, table.q[0].max(axis=1), flow, qtable=table)
