"""Fast invariant checks run by ``sparcc selftest``.

Every check is deterministic (fixed seeds) so two runs print the same
report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import _kernels
from ._kernels import _pykernels
from .fredholm import build_system, solve
from .outcome import NormalOutcome, RegressionParams
from .quadrature import default_support, gauss_hermite, make_grid, simpson_weights
from .score import ScoreContext


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _fixture():
    from . import simulation as sim

    cfg = sim.SimConfig(n=400, replicates=1)
    alpha2 = (2.0, 0.0, 2.5, 0.0)
    data = sim.generate_complete_data(cfg, alpha2, np.random.default_rng(7))
    eta1, eta2 = sim.true_densities(cfg, alpha2)
    outcome = NormalOutcome()
    grid = make_grid(eta1, (0.0, 1.0), 50, default_support(data.w))
    theta = RegressionParams(1.0, 10.0, 2.0).to_vector()
    return cfg, alpha2, data, eta1, eta2, outcome, grid, theta


def check_quadrature(fx) -> CheckResult:
    cfg, alpha2, *_ = fx
    from .simulation import censoring_probability
    from scipy import stats

    x, w = simpson_weights(0.0, 1.0, 2000)
    cubic = abs(float(np.dot(w, x ** 3)) - 0.25)
    t, gw = gauss_hermite(20)
    moments = max(abs(gw.sum() - 1), abs(np.dot(gw, t ** 2) - 1), abs(np.dot(gw, t ** 4) - 3))

    def integrand(v, z):
        a1, b1 = cfg.alpha1[0] + cfg.alpha1[1] * z, cfg.alpha1[2] + cfg.alpha1[3] * z
        return stats.beta.pdf(v, a1, b1) * stats.beta.cdf(v, alpha2[0], alpha2[2])

    ref = sum(0.5 * integrate.quad(integrand, 0, 1, args=(z,), epsabs=1e-13)[0] for z in (0.0, 1.0))
    calib = abs(censoring_probability(cfg.alpha1, alpha2) - ref)
    ok = cubic < 1e-12 and moments < 1e-12 and calib < 1e-5
    return CheckResult("quadrature", ok,
                       f"simpson cubic err {cubic:.1e}, hermite moment err {moments:.1e}, "
                       f"censoring integral err {calib:.1e}")


def check_grid(fx) -> CheckResult:
    grid = fx[6]
    err = max(abs(grid.mass(lv).sum() - 1.0) for lv in grid.levels)
    neg = min(grid.mass(lv).min() for lv in grid.levels)
    return CheckResult("grid-normalization", err < 1e-12 and neg >= 0, f"max |sum r - 1| {err:.1e}")


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def check_score_gradient(fx) -> CheckResult:
    outcome = fx[5]
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        theta = rng.normal([1, 10, 2, 0], [1, 2, 1, 0.5])
        x, z = rng.random(), float(rng.integers(0, 2))
        y = outcome.mean(x, z, theta) + rng.normal() * np.exp(theta[-1] / 2)
        g = outcome.score_full(y, x, z, theta)
        fd = np.empty(4)
        for j in range(4):
            h = 1e-6 * max(1.0, abs(theta[j]))
            e = np.zeros(4)
            e[j] = h
            fd[j] = (outcome.log_density(y, x, z, theta + e) - outcome.log_density(y, x, z, theta - e)) / (2 * h)
        worst = max(worst, _rel(g, fd))
    return CheckResult("score-gradient", worst < 1e-5, f"max rel err {worst:.1e} over 100 points")


def check_mle_gradient(fx) -> CheckResult:
    _, _, data, eta1, eta2, outcome, grid, theta = fx
    ctx = ScoreContext(outcome, eta1, None, None)
    rng = np.random.default_rng(13)
    idx = rng.choice(np.flatnonzero(data.delta == 0), 20, replace=False)
    y, w, d, zs = data.y[idx], data.w[idx], data.delta[idx], data.zs[idx]
    g = ctx.smle_arrays(y, w, d, zs, theta)
    fd = np.empty_like(g)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-6 * max(1.0, abs(theta[j]))
        up = ctx.mle_loglik_arrays(y, w, d, zs, theta + e)
        dn = ctx.mle_loglik_arrays(y, w, d, zs, theta - e)
        fd[:, j] = (up - dn) / (2 * e[j])
    worst = _rel(g, fd)
    return CheckResult("mle-gradient", worst < 1e-5, f"max rel err {worst:.1e} over 20 censored records")


def check_fredholm(fx) -> CheckResult:
    _, _, _, eta1, eta2, outcome, grid, theta = fx
    worst_res, worst_sym = 0.0, 0.0
    for level in grid.levels:
        system = build_system(level, theta, grid, eta2, outcome)
        sol = solve(system)
        worst_res = max(worst_res, sol.residual_norm)
        worst_sym = max(worst_sym, float(np.max(np.abs(system.M - system.M.T))))
    from .fredholm import FredholmSystem

    zero = FredholmSystem(system.d, system.M, np.zeros_like(system.B), grid, system.level, theta,
                          system.interval_mass)
    zero_ok = not np.any(solve(zero).A)
    ok = worst_res < 1e-8 and worst_sym < 1e-10 and zero_ok
    return CheckResult("fredholm", ok, f"residual {worst_res:.1e}, asymmetry {worst_sym:.1e}, "
                                       f"zero rhs {'exact' if zero_ok else 'NONZERO'}")


def check_kernels(fx) -> CheckResult:
    if _kernels.BACKEND != "cython":
        return CheckResult("kernel-parity", True, "compiled kernels not built; numpy fallback active")
    _, _, data, eta1, eta2, outcome, grid, theta = fx
    level = grid.levels[0]
    nodes = grid.nodes
    means = np.ascontiguousarray(outcome.mean(nodes, level, theta))
    design = np.ascontiguousarray(outcome.design(nodes, level))
    r = np.ascontiguousarray(grid.mass(level))
    pi = np.ascontiguousarray(np.linspace(0.0, 0.02, nodes.size))
    t, w = gauss_hermite(20)
    args = (means, r, pi, design, 1.0, np.ascontiguousarray(t), np.ascontiguousarray(w), 1e-300)
    Mc, Bc, _ = _kernels.assemble_fredholm(*args)
    Mp, Bp, _ = _pykernels.assemble_fredholm(*args)
    y, ww = np.ascontiguousarray(data.y[:50]), np.ascontiguousarray(data.w[:50])
    with np.errstate(divide="ignore"):
        lr = np.ascontiguousarray(np.log(r))
    Wc, Lc = _kernels.tail_weights(y, ww, nodes, lr, means, 1.0)
    Wp, Lp = _pykernels.tail_weights(y, ww, nodes, lr, means, 1.0)
    err = max(_rel(Mc, Mp), _rel(Bc, Bp), _rel(Wc, Wp), _rel(Lc, Lp))
    return CheckResult("kernel-parity", err < 1e-10, f"max rel diff compiled vs numpy {err:.1e}")


def check_efficient_score(fx) -> CheckResult:
    _, _, data, eta1, eta2, outcome, grid, theta = fx
    from .fredholm import interpolate_a

    ctx = ScoreContext(outcome, eta1, eta2, grid)
    S = ctx.seff_matrix(data, theta)
    ev = np.flatnonzero(data.delta == 1)
    worst = 0.0
    for level in grid.levels:
        rows = ev[data.zs[ev] == level]
        expect = outcome.score_full(data.y[rows], data.w[rows], level, theta) \
            - interpolate_a(ctx.solution(level, theta), eta1, data.w[rows], level)
        worst = max(worst, float(np.max(np.abs(S[rows] - expect))))
    return CheckResult("efficient-score", worst < 1e-12 and np.all(np.isfinite(S)),
                       f"uncensored decomposition err {worst:.1e}")


CHECKS = (check_quadrature, check_grid, check_score_gradient, check_mle_gradient, check_fredholm,
          check_kernels, check_efficient_score)


def run_checks() -> list[CheckResult]:
    fx = _fixture()
    out = []
    for check in CHECKS:
        try:
            out.append(check(fx))
        except Exception as exc:  # noqa: BLE001 - report, never crash the self-test
            name = check.__name__.removeprefix("check_").replace("_", "-")
            out.append(CheckResult(name, False, f"raised {type(exc).__name__}: {exc}"))
    return out
