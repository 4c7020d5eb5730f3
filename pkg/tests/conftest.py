import numpy as np
import pytest

from m3lab.agents import UniformPolicy
from m3lab.envs import GridWorld


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def frozen_grid():
    return GridWorld(5, frozen_ghost=True, terminate=False)


@pytest.fixture(scope="session")
def grid():
    return GridWorld(5)


@pytest.fixture
def uniform4():
    return UniformPolicy(4)


class ConstQ:
    """Critic stand-in returning fixed action values everywhere."""

    def __init__(self, values):
        self.v = np.asarray(values, dtype=float)

    def values(self, S):
        return np.tile(self.v, (len(np.atleast_2d(S)), 1))


class LinearQ:
    """Action values that depend on the state, for planner tests."""

    def __init__(self, W):
        self.W = np.asarray(W, dtype=float)

    def values(self, S):
        return np.atleast_2d(S) @ self.W


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
