import numpy as np
import pytest

from env_gen import TreeEnvSpec, make_tree_env


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: experiment-scale checks (minutes); deselect with -m 'not slow'")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_tree():
    """16-state tree (two copies per node), noiseless rewards."""
    return make_tree_env(TreeEnvSpec(duplication=2, reward_noise_std=0.0, seed=3))
