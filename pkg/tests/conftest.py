import numpy as np
import pytest

from sparcc import simulation as sim
from sparcc.outcome import NormalOutcome, RegressionParams
from sparcc.quadrature import default_support, make_grid

THETA0 = np.array([1.0, 10.0, 2.0, 0.0])


@pytest.fixture(scope="session")
def alpha2_q4():
    return sim.calibrate_censoring(sim.ALPHA1, 0.4)


@pytest.fixture(scope="session")
def alpha2_q8():
    return sim.calibrate_censoring(sim.ALPHA1, 0.8)


def make_data(n, alpha2, seed, **cfg):
    config = sim.SimConfig(n=max(n, 50), **cfg)
    return sim.generate_complete_data(config, alpha2, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def truth_q4(alpha2_q4):
    return sim.true_densities(sim.SimConfig(), alpha2_q4)


@pytest.fixture(scope="session")
def data_q4(alpha2_q4):
    return make_data(2000, alpha2_q4, 123)


@pytest.fixture(scope="session")
def outcome():
    return NormalOutcome()


@pytest.fixture(scope="session")
def grid_q4(truth_q4, data_q4):
    eta1, _ = truth_q4
    return make_grid(eta1, (0.0, 1.0), 50, default_support(data_q4.w))


@pytest.fixture
def theta0():
    return THETA0.copy()


@pytest.fixture
def params0():
    return RegressionParams(1.0, 10.0, 2.0, 0.0, 0.0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT):
            terminalreporter.write_line(line)
