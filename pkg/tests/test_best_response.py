import numpy as np
import pytest
from conftest import random_table_env
from oracles import enumerate_policy_values, per_state_brute_force

from mfgfp.best_response import (QLearningSchedule, QTable, corrupt_policy, exact_best_response,
                                 perturbed_best_response, policy_values,
                                 q_learning_best_response, run_q_learning,
                                 value_iteration_stationary)
from mfgfp.core import RewardModel, closed_form_equilibrium, congestion_benchmark, grid_mfg
from mfgfp.diagnostics import evaluate_policy, learning_error
from mfgfp.flows import FeedbackPolicy, constant_flow, uniform


def random_flow(rng, horizon, num_states):
    flow = rng.random((horizon + 1, num_states)) + 0.1
    return flow / flow.sum(axis=1, keepdims=True)


def shift_env(num_states, table, horizon=3, discount=0.9):
    """Deterministic torus chain: action k moves k cells to the right."""
    num_actions = table.shape[1]
    return grid_mfg(num_states, num_actions, 0.0, float(num_actions - 1), horizon,
                    RewardModel.from_table(table), discount=discount,
                    time_step=1.0 / num_states)


# ---------------------------------------------------------------- dynamic programming


def test_zero_reward_best_response():
    env = grid_mfg(5, 3, -1, 1, 4, RewardModel(), time_step=0.2)
    br = exact_best_response(env, constant_flow(uniform(5), 4), uniform(5))
    assert np.all(br.value_by_state == 0.0)
    assert np.all(br.policy.action_index == 0)


def test_dp_matches_enumeration():
    rng = np.random.default_rng(20)
    for _ in range(20):
        env = random_table_env(rng)
        mu_bar = random_flow(rng, 2, 3)
        mu0 = rng.dirichlet(np.ones(3))
        br = exact_best_response(env, mu_bar, mu0)
        values = enumerate_policy_values(env, mu_bar, mu0)
        best = max(v for v, _ in values)
        assert float(mu0 @ br.value_by_state) == pytest.approx(best, abs=1e-12)
        assert all(float(mu0 @ br.value_by_state) >= v - 1e-12 for v, _ in values)
        assert np.allclose(br.value_by_state, per_state_brute_force(env, mu_bar), atol=1e-12)


def test_dp_optimality_with_noise_and_discount():
    rng = np.random.default_rng(21)
    env = random_table_env(rng, num_states=2, num_actions=2, horizon=3, noise_std=0.3,
                           discount=0.8)
    mu_bar = random_flow(rng, 3, 2)
    mu0 = np.array([0.3, 0.7])
    br = exact_best_response(env, mu_bar, mu0)
    values = enumerate_policy_values(env, mu_bar, mu0)
    assert len(values) == 64
    assert float(mu0 @ br.value_by_state) == pytest.approx(max(v for v, _ in values), abs=1e-12)


def test_bellman_consistency():
    env = congestion_benchmark(20, horizon=30)
    rng = np.random.default_rng(22)
    mu_bar = random_flow(rng, 30, 20)
    br = exact_best_response(env, mu_bar, uniform(20))
    V = br.values
    for t in range(30):
        q = env.reward_table(mu_bar[t]) + env.discount * (env.kernel @ V[t + 1]).T
        assert np.max(np.abs(V[t] - q.max(axis=1))) <= 1e-12
    assert np.allclose(policy_values(env, br.policy, mu_bar), br.value_by_state, atol=1e-10)


def test_lowest_index_tie_break():
    table = np.zeros((3, 3))
    table[:, 1] = table[:, 2] = 1.0
    env = shift_env(3, table, horizon=1)
    br = exact_best_response(env, constant_flow(uniform(3), 1), uniform(3))
    assert np.all(br.policy.action_index == 1)


def test_value_iteration_matches_truncated_dp():
    env = congestion_benchmark(20)
    _, mu_star = closed_form_equilibrium(env.state_grid)
    vi, deltas = value_iteration_stationary(env, mu_star, uniform(20))
    dp = exact_best_response(env, constant_flow(mu_star, env.horizon), uniform(20))
    gamma = env.discount
    assert np.max(np.abs(vi.value_by_state - dp.value_by_state)) <= 1e-6 * (1 + gamma) / (1 - gamma)
    steps = np.array(deltas)
    # sweeps are exact contractions; the sup-norm change itself carries a few ulps of |V|
    roundoff = 16 * np.finfo(float).eps * np.max(np.abs(vi.value_by_state))
    assert np.all(steps[1:] <= (gamma + 1e-9) * steps[:-1] + roundoff)


def test_value_iteration_zero_reward():
    env = grid_mfg(4, 2, -1, 1, 5, RewardModel(), discount=0.9, time_step=0.25)
    vi, deltas = value_iteration_stationary(env, uniform(4))
    assert len(deltas) == 1 and np.all(vi.value_by_state == 0.0)


@pytest.mark.xfail(strict=True, reason="the discrete best response to the closed-form density "
                   "does not reproduce the closed-form control; see the project notes")
def test_best_response_to_closed_form_density():
    env = congestion_benchmark(200)
    a_star, mu_star = closed_form_equilibrium(env.state_grid)
    br = exact_best_response(env, constant_flow(mu_star, env.horizon), uniform(200))
    control = env.action_grid.values[br.policy.action_index[0]]
    close = np.abs(control - a_star) <= env.action_grid.step + 1e-12
    assert close.mean() >= 0.9


# ---------------------------------------------------------------- perturbed responses


def test_zero_corruption_is_exact():
    env = congestion_benchmark(10, horizon=6)
    mu_bar = constant_flow(uniform(10), 6)
    exact = exact_best_response(env, mu_bar, uniform(10))
    pert = perturbed_best_response(env, mu_bar, uniform(10), 0.0, np.random.default_rng(0))
    assert np.array_equal(pert.policy.action_index, exact.policy.action_index)
    assert np.array_equal(pert.flow, exact.flow)


def test_full_corruption_has_positive_learning_error():
    table = np.zeros((4, 3))
    table[:, 2] = 1.0  # unique maximizer everywhere
    env = shift_env(4, table)
    mu_bar = constant_flow(uniform(4), 3)
    exact = exact_best_response(env, mu_bar, uniform(4))
    rng = np.random.default_rng(1)
    pert = perturbed_best_response(env, mu_bar, uniform(4), 1.0, rng)
    if np.array_equal(pert.policy.action_index, exact.policy.action_index):
        pert = perturbed_best_response(env, mu_bar, uniform(4), 1.0, rng)
    assert learning_error(env, exact.policy, pert.policy, mu_bar, uniform(4)) > 0


def test_learning_error_grows_with_corruption():
    env = congestion_benchmark(20, horizon=40)
    mu_bar = constant_flow(uniform(20), 40)
    mu0 = uniform(20)
    exact = exact_best_response(env, mu_bar, mu0)
    means = []
    for p in (0.0, 0.1, 0.3, 0.6, 1.0):
        errs = [learning_error(env, exact.policy,
                               perturbed_best_response(env, mu_bar, mu0, p,
                                                       np.random.default_rng(s)).policy,
                               mu_bar, mu0) for s in range(20)]
        assert min(errs) >= -1e-12
        means.append(np.mean(errs))
    assert means[0] == 0.0
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_corrupt_policy_validation():
    with pytest.raises(ValueError):
        corrupt_policy(FeedbackPolicy(np.zeros(3, dtype=int)), 2, 1.5, np.random.default_rng(0))


# ---------------------------------------------------------------- Q-learning


def test_q_learning_recovers_dp_policy_two_states():
    table = np.array([[1.0, 0.0], [0.0, 2.0]])
    env = shift_env(2, table, horizon=3)
    mu0 = uniform(2)
    # stationary problem
    dp, _ = value_iteration_stationary(env, mu0, mu0)
    schedule = QLearningSchedule(num_episodes=3000, episode_length=30)
    q = q_learning_best_response(env, mu0, mu0, schedule, np.random.default_rng(2))
    assert np.array_equal(q.policy.action_index, dp.policy.action_index)
    # finite-horizon problem
    mu_bar = constant_flow(mu0, 3)
    exact = exact_best_response(env, mu_bar, mu0)
    q = q_learning_best_response(env, mu_bar, mu0, schedule, np.random.default_rng(3))
    assert np.array_equal(q.policy.action_index, exact.policy.action_index)


def test_q_learning_converges_to_dp_values():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(4, 2))
    env = shift_env(4, table, discount=0.8)
    mu0 = uniform(4)
    dp, _ = value_iteration_stationary(env, mu0, mu0, tol=1e-13)
    q_star = table + env.discount * (env.kernel @ dp.value_by_state).T
    schedule = QLearningSchedule(num_episodes=20_000, episode_length=50, explore_floor=1.0)
    learned = run_q_learning(env, mu0, mu0, schedule, np.random.default_rng(5))
    assert np.max(np.abs(learned.q[0] - q_star)) <= 1e-2


def test_zero_learning_rate_leaves_table_unchanged():
    env = congestion_benchmark(10, horizon=5)
    schedule = QLearningSchedule(num_episodes=200, lr_scale=0.0)
    result = q_learning_best_response(env, uniform(10), uniform(10), schedule,
                                      np.random.default_rng(6))
    assert np.all(result.qtable.q == 0.0)
    assert np.all(result.policy.action_index == 0)


def test_q_learning_value_on_benchmark():
    env = congestion_benchmark(20)
    mu0 = uniform(20)
    dp, _ = value_iteration_stationary(env, mu0, mu0)
    q = q_learning_best_response(env, mu0, mu0, QLearningSchedule(num_episodes=50_000),
                                 np.random.default_rng(0))
    v_dp = evaluate_policy(env, dp.policy, mu0, mu0)
    v_q = evaluate_policy(env, q.policy, mu0, mu0)
    assert abs(v_q - v_dp) <= 0.05 * abs(v_dp)


def test_q_learning_is_seeded():
    env = congestion_benchmark(10, horizon=5)
    schedule = QLearningSchedule(num_episodes=500)
    a = run_q_learning(env, uniform(10), uniform(10), schedule, np.random.default_rng(7))
    b = run_q_learning(env, uniform(10), uniform(10), schedule, np.random.default_rng(7))
    assert np.array_equal(a.q, b.q)


def test_warm_start_continues_episode_count():
    env = congestion_benchmark(10, horizon=5)
    schedule = QLearningSchedule(num_episodes=100)
    table = run_q_learning(env, uniform(10), uniform(10), schedule, np.random.default_rng(8))
    table = run_q_learning(env, uniform(10), uniform(10), schedule, np.random.default_rng(9),
                           table)
    assert table.episodes_run == 200


def test_q_learning_validation():
    with pytest.raises(ValueError):
        QLearningSchedule(num_episodes=0)
    env = congestion_benchmark(10, horizon=5)
    with pytest.raises(ValueError):
        run_q_learning(env, uniform(10), uniform(10), QLearningSchedule(10),
                       np.random.default_rng(0), QTable.zeros(env, stationary=False))
