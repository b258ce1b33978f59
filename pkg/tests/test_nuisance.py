import math

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import beta as beta_fn

from sparcc.data import Dataset
from sparcc.errors import (
    ConditioningError,
    PreconditionError,
    TailSupportError,
    UnknownLevelError,
)
from sparcc.nuisance import (
    C_GIVEN_Z,
    X_GIVEN_Z,
    BetaDensity,
    BetaWorkingModel,
    BSplineDensity,
    NoCensoring,
    bspline_knots,
    canonical_spec,
    conditional_moment_E1,
    fit_beta_censored,
    fit_bspline_censored,
    fit_nuisance,
    load_nuisance,
    nuisance_scores,
    record_loglik,
    save_nuisance,
)
from sparcc.outcome import NormalOutcome
from sparcc.quadrature import make_grid
from oracles import adaptive_simpson, simpson_rule
from conftest import make_data

SIMPSON_X, SIMPSON_W = simpson_rule(0.0, 1.0, 2001)


def _beta15():
    return BetaDensity(BetaWorkingModel(1.5, 0.0, 2.5, 0.0), (0.0,), X_GIVEN_Z, "beta_misspecified", False)


def _uncensored(x, z=None):
    z = np.zeros_like(x) if z is None else z
    return Dataset(y=np.zeros_like(x), w=x, delta=np.ones(x.size, int), z=z)


def test_beta_density_against_beta_function():
    d = _beta15()
    expected = 0.5 ** 0.5 * 0.5 ** 1.5 / beta_fn(1.5, 2.5)
    assert d.density(0.5, 0.0) == pytest.approx(expected, rel=1e-12)


def test_beta_survival_against_adaptive_simpson():
    d = _beta15()
    ref = adaptive_simpson(lambda t: float(d.density(t, 0.0)), 0.3, 1.0, 1e-12)
    assert d.survival(0.3, 0.0) == pytest.approx(ref, abs=1e-8)
    assert d.survival(0.0, 0.0) == pytest.approx(1.0)
    assert d.survival(1.0, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_unknown_level():
    with pytest.raises(UnknownLevelError):
        _beta15().density(0.4, 2.0)


def test_invalid_shapes_rejected():
    with pytest.raises(PreconditionError):
        BetaDensity(BetaWorkingModel(0.5, -1.0, 1.0, 0.0), (0.0, 1.0))


def test_exact_kind_passes_through(truth_q4):
    eta1, _ = truth_q4
    t = np.linspace(0.01, 0.99, 7)
    np.testing.assert_allclose(eta1.density(t, 1.0), stats.beta.pdf(t, 2.5, 1.5), rtol=1e-12)


def _check_valid_density(model, levels):
    rng = np.random.default_rng(0)
    for lv in levels:
        # Simpson converges slowly against the sqrt-type endpoint behaviour
        assert np.dot(SIMPSON_W, model.density(SIMPSON_X, lv)) == pytest.approx(1.0, abs=1e-4)
        assert np.all(model.density(rng.random(10_000), lv) >= 0)
        t = rng.random(100)
        cdf = np.array([np.dot(*_partial(model, lv, ti)) for ti in t])
        np.testing.assert_allclose(model.survival(t, lv) + cdf, 1.0, atol=1e-4)


def _partial(model, lv, t):
    x, w = simpson_rule(0.0, t, 2001)
    return w, model.density(x, lv)


def test_fitted_beta_is_a_valid_density(alpha2_q4):
    data = make_data(3000, alpha2_q4, 5)
    _check_valid_density(fit_beta_censored(data, X_GIVEN_Z, True), (0.0, 1.0))


def test_beta_fit_uncensored_recovers_shapes():
    x = np.random.default_rng(1).beta(1.5, 2.5, 20_000)
    fitted = fit_beta_censored(_uncensored(x), X_GIVEN_Z, z_dependent=False)
    a, b = fitted.shapes(0.0)
    assert abs(a - 1.5) < 0.1 and abs(b - 2.5) < 0.1


def test_beta_fit_matches_brute_force_mle():
    x = np.random.default_rng(3).beta(1.5, 2.5, 50)
    fitted = fit_beta_censored(_uncensored(x), X_GIVEN_Z, z_dependent=False)
    nll = lambda v: -np.sum(stats.beta.logpdf(x, *np.exp(v)))
    grid = np.linspace(-1, 2.5, 80)
    start = min(((u, v) for u in grid for v in grid), key=nll)
    ref = optimize.minimize(nll, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12}).x
    np.testing.assert_allclose(fitted.shapes(0.0), np.exp(ref), atol=1e-4)


def test_beta_fit_censored_simulation_design(alpha2_q4):
    data = make_data(8000, alpha2_q4, 11)
    fitted = fit_beta_censored(data, X_GIVEN_Z, z_dependent=True)
    np.testing.assert_allclose(fitted.model.as_tuple(), (1.5, 1.0, 2.5, -1.0), atol=0.15)
    assert len(fitted.trace) > 0


def test_beta_fit_censoring_target(alpha2_q4):
    data = make_data(8000, alpha2_q4, 12)
    fitted = fit_beta_censored(data, C_GIVEN_Z, z_dependent=True)
    np.testing.assert_allclose(fitted.model.as_tuple(), alpha2_q4, atol=0.3)


def test_beta_fit_needs_events():
    ds = Dataset(y=np.zeros(30), w=np.linspace(0.1, 0.9, 30), delta=np.r_[np.ones(5), np.zeros(25)].astype(int),
                 z=np.zeros(30))
    with pytest.raises(PreconditionError):
        fit_beta_censored(ds, X_GIVEN_Z, z_dependent=False)
    with pytest.raises(PreconditionError):
        fit_beta_censored(_uncensored(np.linspace(0.1, 0.9, 30)), C_GIVEN_Z, z_dependent=False)


def test_beta_score_mean_zero_at_fit(alpha2_q4):
    data = make_data(2000, alpha2_q4, 8)
    fitted = fit_beta_censored(data, X_GIVEN_Z, True)
    assert np.max(np.abs(nuisance_scores(fitted, data).mean(axis=0))) < 1e-5


def test_bspline_one_hot_basis():
    knots = bspline_knots(6, 3)
    coef = np.zeros(6)
    from sparcc.nuisance import BSplineBasis

    basis = BSplineBasis(knots, 3)
    coef[2] = 1.0 / basis.integrals[2]
    d = BSplineDensity(knots, 3, {0.0: coef})
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(d.density(t, 0.0), basis.values(t)[:, 2] / basis.integrals[2])
    assert d.survival(0.0, 0.0) == pytest.approx(1.0) and d.survival(1.0, 0.0) == pytest.approx(0.0)


def test_bspline_basis_bias_small():
    # large sample isolates the approximation error of 8 cubic functions
    x = np.random.default_rng(1).beta(1.5, 2.5, 400_000)
    fitted = fit_bspline_censored(_uncensored(x), X_GIVEN_Z, m=8)
    t = np.linspace(0.05, 0.95, 200)
    assert np.max(np.abs(fitted.density(t, 0.0) - stats.beta.pdf(t, 1.5, 2.5))) < 0.05


def test_bspline_fit_close_to_truth():
    # bound from a 30-seed pilot at n=4000 (max 0.158)
    x = np.random.default_rng(4).beta(1.5, 2.5, 4000)
    fitted = fit_bspline_censored(_uncensored(x), X_GIVEN_Z, m=8)
    t = np.linspace(0.05, 0.95, 200)
    assert np.max(np.abs(fitted.density(t, 0.0) - stats.beta.pdf(t, 1.5, 2.5))) < 0.2
    coef = fitted.coefficients[0.0]
    assert np.all(coef >= 0) and np.dot(coef, fitted.basis_integrals) == pytest.approx(1.0, abs=1e-10)


def test_bspline_fit_uniform():
    x = np.random.default_rng(6).random(4000)
    fitted = fit_bspline_censored(_uncensored(x), X_GIVEN_Z, m=8)
    t = np.linspace(0.1, 0.9, 50)
    # bound from a 30-seed pilot at n=4000 (max 0.104)
    assert np.max(np.abs(fitted.density(t, 0.0) - 1.0)) < 0.12


def test_bspline_fitted_is_valid_density(alpha2_q4):
    data = make_data(2000, alpha2_q4, 21)
    _check_valid_density(fit_bspline_censored(data, C_GIVEN_Z), (0.0, 1.0))


def test_bspline_preconditions():
    with pytest.raises(PreconditionError):
        bspline_knots(4, 3)
    with pytest.raises(PreconditionError):
        fit_bspline_censored(_uncensored(np.linspace(0.1, 0.9, 30)), X_GIVEN_Z, m=8)


def test_bspline_free_params_round_trip(alpha2_q4):
    data = make_data(1000, alpha2_q4, 22)
    fitted = fit_bspline_censored(data, X_GIVEN_Z)
    again = fitted.with_free_params(fitted.free_params())
    for lv in fitted.levels:
        np.testing.assert_allclose(again.coefficients[lv], fitted.coefficients[lv], rtol=1e-10)


def test_beta_free_params_round_trip(truth_q4):
    eta1, _ = truth_q4
    again = eta1.with_free_params(eta1.free_params())
    np.testing.assert_allclose(again.model.as_tuple(), eta1.model.as_tuple(), atol=1e-12)


def test_record_loglik_swaps_roles():
    d = _beta15()
    w, delta, z = np.array([0.3, 0.6]), np.array([1, 0]), np.zeros(2)
    lx = record_loglik(d, w, delta, z, X_GIVEN_Z)
    lc = record_loglik(d, w, delta, z, C_GIVEN_Z)
    assert lx[0] == pytest.approx(math.log(d.density(0.3, 0.0)))
    assert lx[1] == pytest.approx(math.log(d.survival(0.6, 0.0)))
    assert lc[0] == pytest.approx(math.log(d.survival(0.3, 0.0)))
    assert lc[1] == pytest.approx(math.log(d.density(0.6, 0.0)))


def test_no_censoring_model():
    nc = NoCensoring((0.0, 1.0))
    assert nc.survival(0.5, 1.0) == 1.0 and nc.density(0.5, 0.0) == 0.0


def test_spec_aliases():
    assert canonical_spec("parametric") == "correct"
    assert canonical_spec("parametric-mis") == "incorrect"
    assert canonical_spec("bspline") == "nonpar"
    with pytest.raises(ValueError):
        canonical_spec("kernel")
    with pytest.raises(PreconditionError):
        fit_nuisance(None, X_GIVEN_Z, "exact")


@pytest.mark.parametrize("kind", ["beta", "bspline", "none"])
def test_serialization_round_trip(tmp_path, alpha2_q4, kind):
    data = make_data(1000, alpha2_q4, 30)
    model = {"beta": lambda: fit_beta_censored(data, C_GIVEN_Z, True),
             "bspline": lambda: fit_bspline_censored(data, X_GIVEN_Z),
             "none": lambda: NoCensoring((0.0, 1.0))}[kind]()
    path = tmp_path / "eta.txt"
    save_nuisance(model, path)
    back = load_nuisance(path)
    t = np.linspace(0.01, 0.99, 33)
    for lv in (0.0, 1.0):
        np.testing.assert_array_equal(back.density(t, lv), model.density(t, lv))
        np.testing.assert_array_equal(back.survival(t, lv), model.survival(t, lv))
    assert back.target == model.target and back.kind == model.kind


def test_conditional_moment_identity_and_oracle(truth_q4):
    eta1, _ = truth_q4
    outcome = NormalOutcome()
    theta = np.array([1.0, 10.0, 2.0, 0.0])
    grid = make_grid(eta1, (0.0, 1.0), 2001, (1e-6, 1 - 1e-6))
    w, z = 0.3, 1.0
    y = 1 + 10 * 0.6 + 2
    one = conditional_moment_E1(eta1, outcome, lambda x: np.ones_like(x), y, w, z, theta, grid)
    assert float(one) == 1.0
    got = conditional_moment_E1(eta1, outcome, lambda x: x, y, w, z, theta, grid)
    # Simpson ratio on [w, 1] of x f(y|x) eta1(x) over f(y|x) eta1(x)
    x, sw = simpson_rule(w, 1.0, 2001)
    k = stats.norm.pdf(y, outcome.mean(x, z, theta), 1.0) * eta1.density(x, z)
    ref = np.dot(sw, x * k) / np.dot(sw, k)
    # grid masses vs continuous Simpson differ by O(h) near w
    assert got == pytest.approx(ref, abs=1e-5)


def test_conditional_moment_errors(truth_q4):
    eta1, _ = truth_q4
    grid = make_grid(eta1, (0.0, 1.0), 20, (0.05, 0.9))
    theta = np.array([1.0, 10.0, 2.0, 0.0])
    with pytest.raises(TailSupportError):
        conditional_moment_E1(eta1, NormalOutcome(), lambda x: x, 5.0, 0.95, 0.0, theta, grid)
    with pytest.raises(ConditioningError):
        conditional_moment_E1(eta1, NormalOutcome(), lambda x: x, 1e5, 0.3, 0.0, theta, grid)
