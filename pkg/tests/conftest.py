import numpy as np
import pytest

from diamond_maps import MixtureOracle, Scheduler
from diamond_maps.bench.problems import point_mass, standard_normal_1d, two_mode_mixture

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def linear():
    return Scheduler("linear")


@pytest.fixture(scope="session")
def gm2():
    return two_mode_mixture()


@pytest.fixture(scope="session")
def oracle_gm(gm2, linear):
    return MixtureOracle(gm2, linear)


@pytest.fixture(scope="session")
def oracle_1d(linear):
    return MixtureOracle(standard_normal_1d(), linear)


@pytest.fixture(scope="session")
def oracle_point():
    return MixtureOracle(point_mass([0.7, -0.3]), Scheduler("linear"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
