"""SPARCC, observed-data MLE, complete-case and oracle estimators.

All four solve ``mean_i psi_i(theta) = 0`` for the normal outcome model
with the damped Newton solver :func:`solve_estimating_equation`. Standard
errors come from the empirical sandwich; for SPARCC and the MLE with
parametric working models the nuisance likelihood scores are stacked on
top of the outcome estimating function so their estimation error is
propagated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, DomainError, NumericalError, PreconditionError
from .nuisance import (
    C_GIVEN_Z,
    X_GIVEN_Z,
    BetaDensity,
    NoCensoring,
    NuisanceDensity,
    canonical_spec,
    fit_nuisance,
    nuisance_scores,
)
from .outcome import NormalOutcome, RegressionParams
from .quadrature import DEFAULT_HERMITE_ORDER, DEFAULT_NODES, default_support, make_grid
from .score import ScoreContext

log = logging.getLogger(__name__)

ESTIMATORS = ("sparcc", "mle", "complete_case", "oracle")
TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
RIDGE = 1e-8


@dataclass(frozen=True)
class FitOptions:
    """Tuning knobs shared by the estimators.

    ``eta1_truth`` and ``eta2_truth`` are only consulted for the ``exact``
    nuisance specification.
    """

    nodes: int = DEFAULT_NODES
    hermite_order: int = DEFAULT_HERMITE_ORDER
    tol: float = TOL
    max_iter: int = MAX_ITER
    bspline_m: int = 8
    bspline_degree: int = 3
    interaction: bool = False
    variance: bool = True
    eta1_truth: NuisanceDensity | None = None
    eta2_truth: NuisanceDensity | None = None


@dataclass(frozen=True, eq=False)
class FitResult:
    estimator: str
    beta_hat: RegressionParams
    theta: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    iterations: int
    converged: bool
    names: tuple
    label: str = ""
    diagnostics: dict = field(default_factory=dict)

    def estimate(self, name: str) -> float:
        return float(self.theta[self.names.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def rows(self):
        """``(parameter, estimate, se)`` tuples in parameter order."""
        return [(n, float(t), float(s)) for n, t, s in zip(self.names, self.theta, self.se)]


# ---------------------------------------------------------------------------
# root finding


def _jacobian(fun: Callable, x: np.ndarray, f0: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian with step max(1e-6, 1e-6 |x_j|)."""
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = max(1e-6, 1e-6 * abs(x[j]))
        xh = x.copy()
        xh[j] += h
        J[:, j] = (fun(xh) - f0) / h
    return J


def _safe_norm(fun, x):
    try:
        f = np.asarray(fun(x), float)
    except NumericalError:
        return None, np.inf
    if not np.all(np.isfinite(f)):
        return None, np.inf
    return f, float(np.max(np.abs(f)))


def solve_estimating_equation(score_sum: Callable, init, tol: float = TOL, max_iter: int = MAX_ITER,
                              max_halvings: int = MAX_HALVINGS):
    """Damped Newton iteration for ``score_sum(theta) = 0``.

    Returns ``(RegressionParams, diagnostics)`` where the diagnostics hold
    the final ``theta`` vector, the iteration count and the sup-norm trace.
    Raises :class:`ConvergenceError` when the line search stalls or the
    iteration budget runs out.
    """
    x = np.array(init.to_vector(True) if isinstance(init, RegressionParams) else init, dtype=float)
    if isinstance(init, RegressionParams) and x.size == 5 and init.beta3 == 0.0:
        x = init.to_vector(False)
    f, norm = _safe_norm(score_sum, x)
    if f is None:
        raise PreconditionError("estimating function is not finite at the starting value")
    trace = [norm]
    ridged = 0
    for it in range(max_iter + 1):
        if norm < tol:
            return RegressionParams.from_vector(x), {"theta": x, "iterations": it, "trace": trace,
                                                     "ridge_retries": ridged}
        if it == max_iter:
            break
        J = _jacobian(score_sum, x, f)
        step = None
        for ridge in (0.0, RIDGE):
            try:
                cand = np.linalg.solve(J + ridge * np.eye(x.size), -f)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(cand)):
                step = cand
                ridged += ridge > 0
                break
        if step is None:
            raise ConvergenceError(f"singular Jacobian at iteration {it}", trace)
        lam = 1.0
        for _ in range(max_halvings + 1):
            xn = x + lam * step
            fn, nn = _safe_norm(score_sum, xn)
            if fn is not None and nn < norm:
                break
            lam *= 0.5
        else:
            raise ConvergenceError(f"line search failed at iteration {it} (sup-norm {norm:.3g})", trace)
        x, f, norm = xn, fn, nn
        trace.append(norm)
    raise ConvergenceError(f"no convergence in {max_iter} iterations (sup-norm {norm:.3g})", trace)


# ---------------------------------------------------------------------------
# sandwich variance


def _finalize_vcov(V: np.ndarray):
    V = 0.5 * (V + V.T)
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    return V, se


def _nan_vcov(p: int):
    return np.full((p, p), np.nan), np.full(p, np.nan)


def _sandwich_core(bread: np.ndarray, meat: np.ndarray, n: int, p: int):
    """Last ``p`` x ``p`` block of bread^-1 meat bread^-T / n."""
    try:
        Binv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(Binv)) or np.linalg.cond(bread) > 1e14:
        return None
    V = Binv @ meat @ Binv.T / n
    return V[-p:, -p:]


@dataclass
class StackedSpec:
    """Estimating functions to stack above the outcome score.

    ``score_fn(eta1, eta2, theta)`` returns the n x p outcome estimating
    function; each entry of ``nuisances`` is ``(name, model, target)`` for
    a parametric working model whose likelihood score is stacked.
    ``efficient`` selects the inverse outer-product form.
    """

    score_fn: Callable
    eta1: NuisanceDensity | None
    eta2: NuisanceDensity | None
    nuisances: list = field(default_factory=list)
    efficient: bool = False


def sandwich_variance(dataset, fit: FitResult | np.ndarray, stacked: StackedSpec):
    """Empirical sandwich covariance of ``theta``.

    Returns ``(vcov, se, info)``. A singular bread yields NaN entries and
    ``info["variance_failure"]``.
    """
    theta = np.asarray(fit.theta if isinstance(fit, FitResult) else fit, float)
    p = theta.size
    n = dataset.n
    info: dict = {}
    S = stacked.score_fn(stacked.eta1, stacked.eta2, theta)
    if stacked.efficient:
        meat = S.T @ S
        try:
            V = np.linalg.inv(meat)
        except np.linalg.LinAlgError:
            V = None
        if V is None or not np.all(np.isfinite(V)):
            info["variance_failure"] = "singular outer product of efficient scores"
            return (*_nan_vcov(p), info)
        info["variance_form"] = "efficient"
        return (*_finalize_vcov(V), info)

    blocks = []
    sizes = []
    for name, model, target in stacked.nuisances:
        blocks.append(nuisance_scores(model, dataset, target, h=1e-5))
        sizes.append(blocks[-1].shape[1])
    blocks.append(S)
    Psi = np.hstack(blocks)
    q = Psi.shape[1]
    meat = Psi.T @ Psi / n
    bread = np.zeros((q, q))

    # nuisance blocks: derivative of the mean likelihood score in its own parameters
    off = 0
    for (name, model, target), k in zip(stacked.nuisances, sizes):
        u0 = model.free_params()
        for j in range(k):
            h = 1e-4 * max(1.0, abs(u0[j]))
            e = np.zeros(k)
            e[j] = h
            up = nuisance_scores(model.with_free_params(u0 + e), dataset, target, h=1e-5).mean(axis=0)
            dn = nuisance_scores(model.with_free_params(u0 - e), dataset, target, h=1e-5).mean(axis=0)
            bread[off:off + k, off + j] = (up - dn) / (2 * h)
        # cross block: outcome score in the nuisance parameters
        for j in range(k):
            h = 1e-5 * max(1.0, abs(u0[j]))
            e = np.zeros(k)
            e[j] = h
            cols = []
            for sgn in (1.0, -1.0):
                moved = model.with_free_params(u0 + sgn * e)
                e1 = moved if target == X_GIVEN_Z else stacked.eta1
                e2 = moved if target == C_GIVEN_Z else stacked.eta2
                cols.append(stacked.score_fn(e1, e2, theta).mean(axis=0))
            bread[q - p:, off + j] = (cols[0] - cols[1]) / (2 * h)
        off += k
    f0 = S.mean(axis=0)
    bread[q - p:, q - p:] = _jacobian(lambda t: stacked.score_fn(stacked.eta1, stacked.eta2, t).mean(axis=0),
                                      theta, f0)
    V = _sandwich_core(bread, meat, n, p)
    if V is None:
        info["variance_failure"] = "singular bread matrix"
        return (*_nan_vcov(p), info)
    info["variance_form"] = "stacked" if stacked.nuisances else "sandwich"
    info["stacked_nuisances"] = [name for name, _, _ in stacked.nuisances]
    return (*_finalize_vcov(V), info)


# ---------------------------------------------------------------------------
# helpers


def _check_unit_interval(dataset):
    if np.any(dataset.w <= 0) or np.any(dataset.w >= 1):
        raise DomainError("w must lie in (0, 1); rescale the data first (see --scale-margin)")


def _resolve(dataset, target: str, spec: str, options: FitOptions) -> NuisanceDensity:
    spec = canonical_spec(spec)
    truth = options.eta1_truth if target == X_GIVEN_Z else options.eta2_truth
    if spec == "exact" and truth is None and target == C_GIVEN_Z and not np.any(dataset.delta == 0):
        truth = NoCensoring(tuple(float(v) for v in dataset.scalar_levels))
    return fit_nuisance(dataset, target, spec, truth=truth, bspline_m=options.bspline_m,
                        bspline_degree=options.bspline_degree)


def _describe(model: NuisanceDensity) -> str:
    if isinstance(model, BetaDensity):
        return f"{model.kind}:{','.join(f'{v:.6g}' for v in model.model.as_tuple())}"
    return f"{model.kind}"


def _is_parametric(model) -> bool:
    return isinstance(model, BetaDensity) and model.kind != "exact"


def _result(estimator, label, outcome, diag, vcov, se, info, extra) -> FitResult:
    theta = np.asarray(diag["theta"], float)
    diagnostics = {"score_sup_norm": diag["trace"][-1], "trace": diag["trace"],
                   "ridge_retries": diag.get("ridge_retries", 0)}
    diagnostics.update(info)
    diagnostics.update(extra)
    return FitResult(estimator, RegressionParams.from_vector(theta), theta, vcov, se,
                     diag["iterations"], True, tuple(outcome.names()), label, diagnostics)


def _closed_form(outcome: NormalOutcome, y, x, z):
    X = outcome.design(x, z)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return np.concatenate([beta, [np.log(np.mean(resid * resid))]])


def _fully_observed_fit(estimator, label, dataset, y, x, z, rows, options):
    outcome = NormalOutcome(options.interaction)
    theta0 = _closed_form(outcome, y, x, z)
    n = dataset.n

    def score_matrix(_e1, _e2, theta):
        out = np.zeros((n, outcome.p))
        out[rows] = outcome.score_full(y, x, z, theta)
        return out

    # closed form is the root; one Newton pass confirms it to tolerance
    params, diag = solve_estimating_equation(lambda t: score_matrix(None, None, t).mean(axis=0), theta0,
                                             options.tol, options.max_iter)
    vcov, se, info = (_nan_vcov(outcome.p) + ({},)) if not options.variance else \
        sandwich_variance(dataset, diag["theta"], StackedSpec(score_matrix, None, None))
    return _result(estimator, label, outcome, diag, vcov, se, info, {"n_used": int(np.size(y))})


# ---------------------------------------------------------------------------
# estimators


def fit_complete_case(dataset, options: FitOptions | None = None) -> FitResult:
    """Normal-model MLE on the uncensored records."""
    options = options or FitOptions()
    dataset = _canonical_order(dataset)
    p = NormalOutcome(options.interaction).p
    rows = np.flatnonzero(dataset.delta == 1)
    if rows.size < p + 1:
        raise PreconditionError(f"complete-case fit needs at least {p + 1} uncensored records, found {rows.size}")
    return _fully_observed_fit("complete_case", "cc", dataset, dataset.y[rows], dataset.w[rows],
                               dataset.zs[rows], rows, options)


def fit_oracle(dataset, options: FitOptions | None = None) -> FitResult:
    """Normal-model MLE using the latent covariate."""
    options = options or FitOptions()
    p = NormalOutcome(options.interaction).p
    if not dataset.has_x:
        raise PreconditionError("the oracle estimator needs the latent x column")
    if dataset.n < p + 1:
        raise PreconditionError(f"oracle fit needs at least {p + 1} records, found {dataset.n}")
    dataset = _canonical_order(dataset)
    rows = np.arange(dataset.n)
    return _fully_observed_fit("oracle", "oracle", dataset, dataset.y, dataset.x, dataset.zs, rows, options)


def _canonical_order(dataset):
    """Rows sorted by (w, y, z, delta) so sums do not depend on input order."""
    order = np.lexsort((dataset.delta, dataset.zs, dataset.y, dataset.w))
    return dataset.permuted(order)


def _initial(dataset, options):
    try:
        return fit_complete_case(dataset, FitOptions(interaction=options.interaction, variance=False)).theta
    except (PreconditionError, ConvergenceError):
        outcome = NormalOutcome(options.interaction)
        return _closed_form(outcome, dataset.y, dataset.w, dataset.zs)


def fit_sparcc(dataset, eta1_spec: str = "correct", eta2_spec: str = "correct",
               options: FitOptions | None = None) -> FitResult:
    """Root of the summed efficient score with plug-in nuisance densities."""
    options = options or FitOptions()
    _check_unit_interval(dataset)
    dataset = _canonical_order(dataset)
    outcome = NormalOutcome(options.interaction)
    levels = tuple(float(v) for v in dataset.scalar_levels)
    eta1 = _resolve(dataset, X_GIVEN_Z, eta1_spec, options)
    eta2 = _resolve(dataset, C_GIVEN_Z, eta2_spec, options)
    support = default_support(dataset.w, upper=eta1.support[1])

    def context(e1, e2):
        grid = make_grid(e1, levels, options.nodes, support)
        return ScoreContext(outcome, e1, e2, grid, options.hermite_order)

    ctx = context(eta1, eta2)
    theta0 = _initial(dataset, options)
    params, diag = solve_estimating_equation(lambda t: ctx.seff_matrix(dataset, t).mean(axis=0), theta0,
                                             options.tol, options.max_iter)

    def score_fn(e1, e2, theta):
        c = ctx if (e1 is eta1 and e2 is eta2) else context(e1, e2)
        return c.seff_matrix(dataset, theta)

    spec1, spec2 = canonical_spec(eta1_spec), canonical_spec(eta2_spec)
    stacked = StackedSpec(score_fn, eta1, eta2,
                          [(f"eta1:{spec1}", eta1, X_GIVEN_Z)] * _is_parametric(eta1)
                          + [(f"eta2:{spec2}", eta2, C_GIVEN_Z)] * _is_parametric(eta2),
                          efficient="nonpar" in (spec1, spec2))
    if options.variance:
        vcov, se, info = sandwich_variance(dataset, diag["theta"], stacked)
    else:
        vcov, se = _nan_vcov(outcome.p)
        info = {}
    extra = {"eta1": _describe(eta1), "eta2": _describe(eta2), "nodes": options.nodes,
             "grid_support": support, "fredholm_max_residual": ctx.max_residual,
             "underflows": ctx.underflows}
    return _result("sparcc", f"sparcc:{spec1}/{spec2}", outcome, diag, vcov, se, info, extra)


def fit_mle(dataset, eta1_spec: str = "correct", options: FitOptions | None = None) -> FitResult:
    """Root of the observed-data likelihood score with a plug-in covariate density."""
    options = options or FitOptions()
    _check_unit_interval(dataset)
    dataset = _canonical_order(dataset)
    outcome = NormalOutcome(options.interaction)
    eta1 = _resolve(dataset, X_GIVEN_Z, eta1_spec, options)
    ctx = ScoreContext(outcome, eta1, None, None, options.hermite_order)
    theta0 = _initial(dataset, options)
    params, diag = solve_estimating_equation(lambda t: ctx.smle_matrix(dataset, t).mean(axis=0), theta0,
                                             options.tol, options.max_iter)

    def score_fn(e1, _e2, theta):
        c = ctx if e1 is eta1 else ScoreContext(outcome, e1, None, None, options.hermite_order)
        return c.smle_matrix(dataset, theta)

    spec1 = canonical_spec(eta1_spec)
    stacked = StackedSpec(score_fn, eta1, None,
                          [(f"eta1:{spec1}", eta1, X_GIVEN_Z)] * _is_parametric(eta1))
    if options.variance:
        vcov, se, info = sandwich_variance(dataset, diag["theta"], stacked)
    else:
        vcov, se = _nan_vcov(outcome.p)
        info = {}
    return _result("mle", f"mle:{spec1}", outcome, diag, vcov, se, info, {"eta1": _describe(eta1)})


def fit(dataset, estimator: str, eta1_spec: str = "correct", eta2_spec: str = "correct",
        options: FitOptions | None = None) -> FitResult:
    """Dispatch on the estimator name (``sparcc``, ``mle``, ``cc`` or ``oracle``)."""
    name = {"cc": "complete_case"}.get(estimator, estimator)
    if name == "sparcc":
        return fit_sparcc(dataset, eta1_spec, eta2_spec, options)
    if name == "mle":
        return fit_mle(dataset, eta1_spec, options)
    if name == "complete_case":
        return fit_complete_case(dataset, options)
    if name == "oracle":
        return fit_oracle(dataset, options)
    raise ValueError(f"unknown estimator {estimator!r}")
