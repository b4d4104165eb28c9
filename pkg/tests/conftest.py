import numpy as np
import pytest

from rrmdp.environments import (AmericanPutParams, HardInstanceParams, build_american_put, build_hard_instance,
                                build_simulated_linear_mdp, random_sign_pattern, uniform_behavior_policy)
from rrmdp.mdp_core import FeatureMap, TabularMDP, collect_dataset


def self_loop_env(H=2, n_actions=2):
    """Two states, deterministic self loops, reward 1 in state 1."""
    S = 2
    table = np.zeros((S, n_actions, 2))
    table[0, :, 0] = 1.0
    table[1, :, 1] = 1.0
    kernel = np.zeros((H, S, n_actions, S))
    kernel[:, 0, :, 0] = 1.0
    kernel[:, 1, :, 1] = 1.0
    theta = np.tile([0.0, 1.0], (H, 1))
    return TabularMDP(FeatureMap(table), kernel, theta, np.array([0.5, 0.5]), name="self_loop")


@pytest.fixture(scope="session")
def sim_env():
    return build_simulated_linear_mdp()


@pytest.fixture(scope="session")
def sim_data(sim_env):
    return collect_dataset(sim_env, uniform_behavior_policy(sim_env), 100, 0)


@pytest.fixture(scope="session")
def sim_data_large(sim_env):
    return collect_dataset(sim_env, uniform_behavior_policy(sim_env), 10_000, 1)


@pytest.fixture(scope="session")
def put_env():
    return build_american_put(AmericanPutParams(d=10, H=10))


@pytest.fixture(scope="session")
def put_data(put_env):
    return collect_dataset(put_env, uniform_behavior_policy(put_env), 500, 3)


@pytest.fixture(scope="session")
def hard_case():
    p = HardInstanceParams(xi=random_sign_pattern(3, 3, 0), K=5000, lam=1.0)
    env, behavior, data = build_hard_instance(p, 4)
    return env, behavior, data


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
