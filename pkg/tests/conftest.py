import numpy as np
import pytest

from hypoflow.operators import Discretization, assemble, build_potential

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def harmonic():
    return build_potential("quadratic", {"omega": 1.0})


@pytest.fixture(scope="session")
def small_ops(harmonic):
    return assemble(Discretization(n_x=48, n_v=16), harmonic)


@pytest.fixture(scope="session")
def medium_ops(harmonic):
    return assemble(Discretization(n_x=64, n_v=24), harmonic)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
