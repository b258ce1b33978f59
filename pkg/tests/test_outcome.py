import numpy as np
import pytest
from scipy import stats

from sparcc.outcome import NormalOutcome, RegressionParams, param_names


def test_param_round_trip():
    p = RegressionParams(1.0, 10.0, 2.0, 0.5, -0.3)
    assert RegressionParams.from_vector(p.to_vector(True)) == p
    q = RegressionParams(1.0, 10.0, 2.0, log_sigma2=0.2)
    assert RegressionParams.from_vector(q.to_vector()) == q
    with pytest.raises(ValueError):
        RegressionParams.from_vector([1, 2, 3])
    with pytest.raises(ValueError):
        RegressionParams(np.nan, 1, 1)


def test_names_and_dimension():
    assert NormalOutcome().p == 4 and NormalOutcome(True).p == 5
    assert param_names(True)[3] == "beta3"
    with pytest.raises(ValueError):
        NormalOutcome().as_vector(RegressionParams(1, 1, 1, beta3=1.0))


def test_log_density_matches_scipy():
    m = NormalOutcome(interaction=True)
    theta = np.array([1.0, 10.0, 2.0, -1.0, 0.4])
    y, x, z = 7.0, 0.3, 1.0
    mean = 1 + 10 * 0.3 + 2 - 0.3
    assert m.log_density(y, x, z, theta) == pytest.approx(stats.norm.logpdf(y, mean, np.exp(0.2)))


@pytest.mark.parametrize("interaction", [False, True])
def test_score_full_gradient_check(interaction):
    """Central differences of log_density on 100 random points, rel err 1e-5."""
    m = NormalOutcome(interaction)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        theta = rng.normal(0, 2, m.p)
        x, z = rng.random(), float(rng.integers(0, 2))
        y = m.mean(x, z, theta) + rng.normal() * np.exp(theta[-1] / 2)
        g = m.score_full(y, x, z, theta)
        for j in range(m.p):
            h = 1e-6 * max(1.0, abs(theta[j]))
            e = np.zeros(m.p)
            e[j] = h
            fd = (m.log_density(y, x, z, theta + e) - m.log_density(y, x, z, theta - e)) / (2 * h)
            worst = max(worst, abs(g[j] - fd) / max(1.0, abs(fd)))
    assert worst < 1e-5


def test_score_full_broadcasts():
    m = NormalOutcome()
    theta = np.array([1.0, 10.0, 2.0, 0.0])
    S = m.score_full(np.ones((3, 5)), np.full((3, 5), 0.5), np.zeros((3, 1)), theta)
    assert S.shape == (3, 5, 4)
