import numpy as np
import pytest

from mfgfp.core import RewardModel, grid_mfg


def random_table_env(rng, num_states=3, num_actions=2, horizon=2, noise_std=0.0, discount=1.0):
    """Small torus MFG whose private reward is a random table and crowd term a congestion penalty."""
    table = rng.normal(size=(num_states, num_actions))

    def crowd(x, masses, h):
        return -2.0 * np.asarray(masses)

    reward = RewardModel.from_table(table, crowd=crowd, crowd_bound=2.0)
    return grid_mfg(num_states, num_actions, -1.0, 1.0, horizon, reward,
                    discount=discount, time_step=1.0 / num_states, noise_std=noise_std)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
