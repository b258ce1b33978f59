"""Conditional densities of X | Z and C | Z and their censored-data fits.

Two families are provided: beta working models whose shapes are linear in
z, and a per-level cubic B-spline density whose coefficients live on the
probability simplex. Both are fit by maximizing the right-censored
likelihood of (W, Delta) given Z; for the censoring variable the roles of
Delta and 1 - Delta swap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.interpolate import BSpline
from scipy.special import betainc, betaln

from ._io import format_floats, parse_floats, read_keyvalue, write_keyvalue
from .errors import (
    ConditioningError,
    ConvergenceError,
    PreconditionError,
    TailSupportError,
    UnknownLevelError,
)

log = logging.getLogger(__name__)

X_GIVEN_Z = "X_given_Z"
C_GIVEN_Z = "C_given_Z"
TARGETS = (X_GIVEN_Z, C_GIVEN_Z)

KINDS = ("beta_regression", "beta_misspecified", "bspline", "exact")

UNDERFLOW_FLOOR = 1e-300
LOG_FLOOR = float(np.log(UNDERFLOW_FLOOR))
GTOL = 1e-6
MAX_ITER = 500


def _level(z) -> float:
    return float(np.ravel([z])[0])


class NuisanceDensity:
    """Base class: a density on ``support`` for each fitted z level."""

    kind: str = ""
    target: str = X_GIVEN_Z
    support: tuple[float, float] = (0.0, 1.0)
    levels: tuple[float, ...] = ()

    def _check_level(self, z) -> float:
        level = _level(z)
        if self.levels and level not in self.levels:
            raise UnknownLevelError(f"z = {level} is not a fitted level {self.levels}")
        return level

    def density(self, t, z):  # pragma: no cover - abstract
        raise NotImplementedError

    def survival(self, t, z):  # pragma: no cover - abstract
        raise NotImplementedError

    def cdf(self, t, z):
        return 1.0 - self.survival(t, z)

    # Parameter vector used when stacking nuisance scores into a sandwich.
    def free_params(self) -> np.ndarray:
        return np.zeros(0)

    def with_free_params(self, u) -> "NuisanceDensity":
        return self


def record_loglik(model: NuisanceDensity, w, delta, z, target: str | None = None) -> np.ndarray:
    """Per-record censored log-likelihood of (W, Delta) given Z.

    For X | Z an event (delta = 1) contributes the density at w and a
    censored record the survival beyond w; for C | Z it is the reverse.
    """
    target = target or model.target
    w = np.asarray(w, float)
    event = np.asarray(delta) == (1 if target == X_GIVEN_Z else 0)
    z = np.asarray(z, float)
    out = np.empty_like(w)
    for level in np.unique(z):
        sel = z == level
        ws, ev = w[sel], event[sel]
        part = np.empty_like(ws)
        with np.errstate(divide="ignore"):
            part[ev] = np.log(np.maximum(model.density(ws[ev], level), 0.0))
            part[~ev] = np.log(np.clip(model.survival(ws[~ev], level), 0.0, 1.0))
        out[sel] = part
    return out


# ---------------------------------------------------------------------------
# beta working models


@dataclass(frozen=True)
class BetaWorkingModel:
    """shape1(z) = a_int + a_slope * z, shape2(z) = b_int + b_slope * z."""

    a_int: float
    a_slope: float
    b_int: float
    b_slope: float

    def shapes(self, z) -> tuple[float, float]:
        z = _level(z)
        return self.a_int + self.a_slope * z, self.b_int + self.b_slope * z

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a_int, self.a_slope, self.b_int, self.b_slope)

    def valid_at(self, levels) -> bool:
        return all(min(self.shapes(z)) > 0 for z in levels)


class BetaDensity(NuisanceDensity):
    def __init__(self, model: BetaWorkingModel, levels, target: str = X_GIVEN_Z,
                 kind: str = "beta_regression", z_dependent: bool = True):
        if kind not in ("beta_regression", "beta_misspecified", "exact"):
            raise ValueError(f"unsupported kind {kind!r} for a beta density")
        self.model = model
        self.levels = tuple(sorted(_level(v) for v in levels))
        self.target = target
        self.kind = kind
        self.z_dependent = bool(z_dependent)
        if not model.valid_at(self.levels):
            raise PreconditionError(f"beta shapes must be positive at every level: {model}")
        self._shapes = {lv: model.shapes(lv) for lv in self.levels}

    def __repr__(self):
        return f"BetaDensity({self.model}, kind={self.kind!r}, target={self.target!r})"

    def shapes(self, z) -> tuple[float, float]:
        level = self._check_level(z)
        return self._shapes[level] if level in self._shapes else self.model.shapes(level)

    def density(self, t, z):
        a, b = self.shapes(z)
        t = np.asarray(t, float)
        inside = (t > 0) & (t < 1)
        tc = np.where(inside, t, 0.5)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            val = np.exp((a - 1) * np.log(tc) + (b - 1) * np.log1p(-tc) - betaln(a, b))
        return np.where(inside, val, 0.0)

    def survival(self, t, z):
        a, b = self.shapes(z)
        t = np.clip(np.asarray(t, float), 0.0, 1.0)
        # reflected regularized incomplete beta; much cheaper than betaincc
        return betainc(b, a, 1.0 - t)

    def sample(self, rng: np.random.Generator, z) -> np.ndarray:
        z = np.asarray(z, float)
        a = self.model.a_int + self.model.a_slope * z
        b = self.model.b_int + self.model.b_slope * z
        return rng.beta(a, b)

    # Free parameters are log shapes at the lowest and highest level (or a
    # single pair when z-independent). Every linear shape map that is
    # positive at all levels corresponds to exactly one such vector.
    def free_params(self) -> np.ndarray:
        if not self.z_dependent or len(self.levels) < 2:
            a, b = self.model.shapes(self.levels[0])
            return np.log([a, b])
        lo, hi = self.levels[0], self.levels[-1]
        (a0, b0), (a1, b1) = self.model.shapes(lo), self.model.shapes(hi)
        return np.log([a0, a1, b0, b1])

    def with_free_params(self, u) -> "BetaDensity":
        return BetaDensity(_beta_from_free(np.asarray(u, float), self.levels, self.z_dependent),
                           self.levels, self.target, self.kind, self.z_dependent)


def _beta_from_free(u, levels, z_dependent) -> BetaWorkingModel:
    u = np.clip(u, -30.0, 30.0)
    if not z_dependent or len(levels) < 2:
        a, b = np.exp(u)
        return BetaWorkingModel(float(a), 0.0, float(b), 0.0)
    lo, hi = levels[0], levels[-1]
    a0, a1, b0, b1 = np.exp(u)
    sa = (a1 - a0) / (hi - lo)
    sb = (b1 - b0) / (hi - lo)
    return BetaWorkingModel(float(a0 - sa * lo), float(sa), float(b0 - sb * lo), float(sb))


class NoCensoring(NuisanceDensity):
    """Degenerate censoring law placing all mass above the covariate support."""

    kind = "exact"

    def __init__(self, levels=(), target: str = C_GIVEN_Z):
        self.levels = tuple(sorted(_level(v) for v in levels))
        self.target = target

    def __repr__(self):
        return "NoCensoring()"

    def density(self, t, z):
        self._check_level(z)
        return np.zeros_like(np.asarray(t, float))

    def survival(self, t, z):
        self._check_level(z)
        return np.ones_like(np.asarray(t, float))


def _moment_init(values) -> tuple[float, float]:
    values = np.asarray(values, float)
    mu = float(np.clip(np.mean(values), 0.05, 0.95))
    var = float(np.var(values)) if values.size > 1 else mu * (1 - mu) / 4
    common = mu * (1 - mu) / max(var, 1e-6) - 1.0
    common = float(np.clip(common, 0.5, 100.0))
    return max(mu * common, 0.2), max((1 - mu) * common, 0.2)


def _central_gradient(f, u, h=1e-6):
    g = np.empty_like(u)
    for k in range(u.size):
        e = np.zeros_like(u)
        e[k] = h
        g[k] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def _numerical_hessian(grad, u, h=1e-4):
    k = u.size
    H = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = h
        H[:, i] = (grad(u + e) - grad(u - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _minimize(objective, grad, u0, what: str):
    """BFGS, then Newton polishing until the gradient sup-norm is below GTOL."""
    trace: list[float] = []
    res = optimize.minimize(objective, u0, jac=grad, method="BFGS",
                            options={"gtol": GTOL, "maxiter": MAX_ITER},
                            callback=lambda uk: trace.append(float(objective(uk))))
    u = res.x
    g = grad(u)
    for _ in range(25):
        if np.max(np.abs(g)) < GTOL:
            break
        H = _numerical_hessian(grad, u)
        try:
            step = np.linalg.solve(H + 1e-10 * np.eye(u.size), g)
        except np.linalg.LinAlgError:
            break
        f0 = objective(u)
        t = 1.0
        while t > 1e-8 and objective(u - t * step) > f0 + 1e-14:
            t *= 0.5
        u = u - t * step
        trace.append(float(objective(u)))
        g = grad(u)
    if not np.all(np.isfinite(u)) or np.max(np.abs(g)) >= GTOL:
        raise ConvergenceError(
            f"{what}: gradient sup-norm {np.max(np.abs(g)):.3g} after {res.nit} iterations", trace)
    return u, trace


def _check_counts(delta, zs, target, levels, minimum, what):
    event = delta == (1 if target == X_GIVEN_Z else 0)
    label = "uncensored" if target == X_GIVEN_Z else "censored"
    for level in levels:
        k = int(np.sum(event & (zs == level)))
        if k < minimum:
            raise PreconditionError(
                f"{what}: need at least {minimum} {label} records at z = {level}, found {k}")


def fit_beta_censored(dataset, target: str = X_GIVEN_Z, z_dependent: bool = True,
                      kind: str | None = None) -> BetaDensity:
    """Censored-data MLE of a beta working model for ``target``."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}")
    zs = dataset.zs
    levels = tuple(float(v) for v in dataset.scalar_levels)
    _check_counts(dataset.delta, zs, target, levels, 10, "beta fit")
    if z_dependent and len(levels) < 2:
        raise PreconditionError("a z-dependent beta model needs at least two z levels")
    if kind is None:
        kind = "beta_regression" if z_dependent else "beta_misspecified"
    w = np.clip(dataset.w, 1e-12, 1 - 1e-12)
    delta = dataset.delta
    event = delta == (1 if target == X_GIVEN_Z else 0)
    n = w.size

    if z_dependent:
        pairs = [_moment_init(w[event & (zs == lv)]) for lv in (levels[0], levels[-1])]
        u0 = np.log([pairs[0][0], pairs[1][0], pairs[0][1], pairs[1][1]])
    else:
        u0 = np.log(_moment_init(w[event]))

    def objective(u):
        model = BetaDensity(_beta_from_free(u, levels, z_dependent), levels, target, kind, z_dependent)
        ll = record_loglik(model, w, delta, zs, target)
        val = -float(np.sum(ll)) / n
        return val if np.isfinite(val) else 1e300

    def grad(u):
        return _central_gradient(objective, u)

    start = objective(u0)
    u, trace = _minimize(objective, grad, u0, f"beta fit for {target}")
    if objective(u) > start + 1e-12:
        raise ConvergenceError("beta fit ended below its starting likelihood", trace)
    fitted = BetaDensity(_beta_from_free(u, levels, z_dependent), levels, target, kind, z_dependent)
    fitted.trace = trace
    return fitted


# ---------------------------------------------------------------------------
# B-spline densities


def bspline_knots(m: int, degree: int = 3, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Clamped knot vector with ``m - degree - 1`` equally spaced interior knots."""
    if m < degree + 2:
        raise PreconditionError(f"need m >= degree + 2 basis functions, got m={m}, degree={degree}")
    interior = np.linspace(lo, hi, m - degree + 1)[1:-1]
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


class BSplineBasis:
    """Basis values, tail integrals and total integrals for a clamped B-spline."""

    def __init__(self, knots, degree: int):
        self.knots = np.asarray(knots, float)
        self.degree = int(degree)
        self.m = self.knots.size - self.degree - 1
        eye = np.eye(self.m)
        self._spline = BSpline(self.knots, eye, self.degree, extrapolate=False)
        self._anti = self._spline.antiderivative()
        self.lo, self.hi = float(self.knots[0]), float(self.knots[-1])
        top = self._anti(self.hi)
        self.integrals = top - self._anti(self.lo)
        self._top = top

    def values(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        v = self._spline(np.clip(t, self.lo, self.hi))
        inside = (t >= self.lo) & (t <= self.hi)
        return np.where(inside[..., None], np.nan_to_num(v), 0.0)

    def tails(self, t) -> np.ndarray:
        """Integral of each basis function over [t, hi]."""
        t = np.clip(np.asarray(t, float), self.lo, self.hi)
        return np.maximum(self._top - self._anti(t), 0.0)


class BSplineDensity(NuisanceDensity):
    """Per-level density ``sum_k coef_k(z) B_k(t)`` with simplex-constrained weights."""

    kind = "bspline"

    def __init__(self, knots, degree: int, coefficients: dict, target: str = X_GIVEN_Z):
        self.basis = BSplineBasis(knots, degree)
        self.degree = int(degree)
        self.target = target
        self.coefficients = {}
        for level, coef in coefficients.items():
            coef = np.array(coef, float)
            if coef.shape != (self.basis.m,) or np.any(coef < 0):
                raise PreconditionError("B-spline coefficients must be nonnegative with one entry per basis")
            coef.setflags(write=False)
            self.coefficients[_level(level)] = coef
        self.levels = tuple(sorted(self.coefficients))
        self.support = (self.basis.lo, self.basis.hi)

    def __repr__(self):
        return f"BSplineDensity(m={self.basis.m}, degree={self.degree}, levels={self.levels})"

    @property
    def knots(self) -> np.ndarray:
        return self.basis.knots

    @property
    def interior_knots(self) -> np.ndarray:
        return self.basis.knots[self.degree + 1:-(self.degree + 1)]

    @property
    def basis_integrals(self) -> np.ndarray:
        return self.basis.integrals

    def density(self, t, z):
        coef = self.coefficients[self._check_level(z)]
        return self.basis.values(t) @ coef

    def survival(self, t, z):
        coef = self.coefficients[self._check_level(z)]
        return np.clip(self.basis.tails(t) @ coef, 0.0, 1.0)

    # Free parameters: softmax logits with the first logit pinned at 0.
    def free_params(self) -> np.ndarray:
        out = []
        for level in self.levels:
            pi = self.coefficients[level] * self.basis.integrals
            logpi = np.log(np.maximum(pi, 1e-300))
            out.append(logpi[1:] - logpi[0])
        return np.concatenate(out)

    def with_free_params(self, u) -> "BSplineDensity":
        u = np.asarray(u, float)
        k = self.basis.m - 1
        coefs = {}
        for i, level in enumerate(self.levels):
            coefs[level] = _softmax_coef(u[i * k:(i + 1) * k], self.basis.integrals)
        return BSplineDensity(self.knots, self.degree, coefs, self.target)


def _softmax(theta):
    e = np.exp(theta - np.max(theta))
    return e / e.sum()


def _softmax_coef(free, integrals):
    return _softmax(np.concatenate([[0.0], free])) / integrals


def fit_bspline_censored(dataset, target: str = X_GIVEN_Z, m: int = 8, degree: int = 3) -> BSplineDensity:
    """Censored-data MLE of a B-spline density, fit separately per z level."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}")
    knots = bspline_knots(m, degree)
    basis = BSplineBasis(knots, degree)
    zs = dataset.zs
    event_all = dataset.delta == (1 if target == X_GIVEN_Z else 0)
    coefs = {}
    traces = {}
    for level in dataset.scalar_levels:
        sel = zs == level
        n_l = int(sel.sum())
        if n_l < 5 * m:
            raise PreconditionError(f"B-spline fit needs at least {5 * m} records at z = {level}, found {n_l}")
        if not np.any(event_all[sel]):
            raise PreconditionError(f"B-spline fit needs at least one event at z = {level}")
        w = dataset.w[sel]
        event = event_all[sel]
        V = np.where(event[:, None], basis.values(w), basis.tails(w)) / basis.integrals

        def objective(free, V=V, n_l=n_l):
            pi = _softmax(np.concatenate([[0.0], free]))
            lik = V @ pi
            if np.any(lik <= 0):
                return 1e300
            return -float(np.sum(np.log(lik))) / n_l

        def grad(free, V=V, n_l=n_l):
            pi = _softmax(np.concatenate([[0.0], free]))
            lik = np.maximum(V @ pi, 1e-300)
            # d log(v.pi)/d theta_k = v_k pi_k / (v.pi) - pi_k
            g = ((V * pi) / lik[:, None]).sum(axis=0) - n_l * pi
            return -g[1:] / n_l

        free0 = np.zeros(m - 1)
        free, trace = _minimize(objective, grad, free0, f"B-spline fit for {target} at z = {level}")
        coefs[float(level)] = _softmax_coef(free, basis.integrals)
        traces[float(level)] = trace
    fitted = BSplineDensity(knots, degree, coefs, target)
    fitted.trace = traces
    return fitted


# ---------------------------------------------------------------------------
# factory, scores, serialization


NUISANCE_SPECS = ("correct", "incorrect", "nonpar", "exact")
_CLI_ALIASES = {
    "parametric": "correct",
    "parametric-mis": "incorrect",
    "bspline": "nonpar",
    "exact": "exact",
    "correct": "correct",
    "incorrect": "incorrect",
    "nonpar": "nonpar",
}


def canonical_spec(spec: str) -> str:
    try:
        return _CLI_ALIASES[spec]
    except KeyError:
        raise ValueError(f"unknown nuisance specification {spec!r}") from None


def fit_nuisance(dataset, target: str, spec: str, truth: NuisanceDensity | None = None,
                 bspline_m: int = 8, bspline_degree: int = 3) -> NuisanceDensity:
    """Fit (or wrap) the nuisance density named by ``spec``.

    ``correct`` is the z-dependent beta working model, ``incorrect`` the
    z-independent one, ``nonpar`` the B-spline estimator and ``exact``
    returns ``truth`` unchanged.
    """
    spec = canonical_spec(spec)
    if spec == "exact":
        if truth is None:
            raise PreconditionError("the exact nuisance needs the true density")
        return truth
    if spec == "correct":
        return fit_beta_censored(dataset, target, z_dependent=True)
    if spec == "incorrect":
        return fit_beta_censored(dataset, target, z_dependent=False)
    return fit_bspline_censored(dataset, target, m=bspline_m, degree=bspline_degree)


def nuisance_scores(model: NuisanceDensity, dataset, target: str | None = None, h: float = 1e-6) -> np.ndarray:
    """Per-record gradients of the censored log-likelihood in the free parameters."""
    u0 = model.free_params()
    target = target or model.target
    out = np.empty((dataset.n, u0.size))
    for k in range(u0.size):
        e = np.zeros_like(u0)
        e[k] = h
        up = record_loglik(model.with_free_params(u0 + e), dataset.w, dataset.delta, dataset.zs, target)
        dn = record_loglik(model.with_free_params(u0 - e), dataset.w, dataset.delta, dataset.zs, target)
        out[:, k] = (up - dn) / (2 * h)
    return out


def conditional_moment_E1(eta1: NuisanceDensity, outcome, g: Callable, y: float, w: float, z: float,
                          params, grid) -> np.ndarray:
    """Grid estimate of E1[I(X > w) g(X) | y, z] / E1[I(X > w) | y, z].

    Node weights are ``r_j(z) f(y | x_j, z)`` restricted to nodes strictly
    above ``w``.
    """
    level = eta1._check_level(z)
    nodes = grid.nodes
    r = grid.mass(level) if level in grid.masses else eta1.density(nodes, level) / np.sum(eta1.density(nodes, level))
    tail = nodes > w
    if not np.any(tail):
        raise TailSupportError(f"no grid node above w = {w}")
    with np.errstate(divide="ignore"):
        logwt = np.log(r[tail]) + outcome.log_density(y, nodes[tail], level, params)
    top = np.max(logwt)
    log_denom = top + np.log(np.sum(np.exp(logwt - top)))
    if not np.isfinite(log_denom) or log_denom < LOG_FLOOR:
        raise ConditioningError(f"tail denominator underflows at y = {y}, w = {w}")
    wt = np.exp(logwt - top)
    vals = np.asarray(g(nodes[tail]), dtype=float)
    return np.tensordot(wt, vals, axes=(0, 0)) / np.tensordot(wt, np.ones_like(vals), axes=(0, 0))


def save_nuisance(model: NuisanceDensity, path) -> None:
    items: dict[str, object] = {"kind": model.kind, "target": model.target,
                                "levels": format_floats(model.levels)}
    if isinstance(model, BetaDensity):
        items["family"] = "beta"
        items["z_dependent"] = int(model.z_dependent)
        items["shape_map"] = format_floats(model.model.as_tuple())
    elif isinstance(model, BSplineDensity):
        items["family"] = "bspline"
        items["degree"] = model.degree
        items["knots"] = format_floats(model.knots)
        for level in model.levels:
            items[f"coef[{level!r}]"] = format_floats(model.coefficients[level])
    elif isinstance(model, NoCensoring):
        items["family"] = "none"
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    write_keyvalue(path, items, header="sparcc nuisance density")


def load_nuisance(path) -> NuisanceDensity:
    kv = read_keyvalue(path)
    family = kv.get("family")
    levels = parse_floats(kv.get("levels", ""))
    target = kv["target"]
    if family == "beta":
        model = BetaWorkingModel(*parse_floats(kv["shape_map"]))
        return BetaDensity(model, levels, target, kv["kind"], bool(int(kv["z_dependent"])))
    if family == "bspline":
        coefs = {level: parse_floats(kv[f"coef[{level!r}]"]) for level in levels}
        return BSplineDensity(parse_floats(kv["knots"]), int(kv["degree"]), coefs, target)
    if family == "none":
        return NoCensoring(levels, target)
    raise ValueError(f"{path}: unknown nuisance family {family!r}")
