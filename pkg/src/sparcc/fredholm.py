"""Discretized integral equation for the projection term a(x, z, beta).

At a fixed z level the equation is collocated at the grid nodes, giving
the linear system ``A (D + M) = B`` where ``A`` holds ``a(x_j) r_j`` in
its columns. ``D`` is diagonal with the censoring survival at each node
divided by its mass, ``M`` is symmetric and ``B`` carries the full-data
score. The censoring integral is exact given the censoring CDF because
the integrand only changes when c crosses a node; the outcome integral
uses Gauss-Hermite centred at each node's mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import DegenerateGridError, ExtrapolationError, SingularSystemError
from .quadrature import DEFAULT_HERMITE_ORDER, gauss_hermite

UNDERFLOW_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class FredholmSystem:
    d: np.ndarray
    M: np.ndarray
    B: np.ndarray
    grid: object
    level: float
    theta: np.ndarray
    interval_mass: np.ndarray
    underflows: int = 0

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.d)

    @property
    def masses(self) -> np.ndarray:
        return self.grid.mass(self.level)

    @property
    def p(self) -> int:
        return self.B.shape[0]


@dataclass(frozen=True, eq=False)
class FredholmSolution:
    A: np.ndarray
    grid: object
    level: float
    residual_norm: float
    method: str = "cholesky"
    diagnostics: dict = field(default_factory=dict)

    @property
    def a_nodes(self) -> np.ndarray:
        """a(x_j, z, beta) at every node (zero where the node has no mass)."""
        r = self.grid.mass(self.level)
        out = np.zeros_like(self.A)
        pos = r > 0
        out[:, pos] = self.A[:, pos] / r[pos]
        return out


def censoring_interval_mass(eta2, nodes, level) -> tuple[np.ndarray, np.ndarray]:
    """Survival at the nodes and P(C in [x_{s-1}, x_s)) with x_{-1} = -inf."""
    surv = np.clip(np.asarray(eta2.survival(nodes, level), float), 0.0, 1.0)
    upper = np.concatenate([[1.0], surv[:-1]])
    return surv, np.maximum(upper - surv, 0.0)


def build_system(level: float, params, grid, eta2, outcome,
                 hermite_order: int = DEFAULT_HERMITE_ORDER) -> FredholmSystem:
    level = float(level)
    theta = outcome.as_vector(params)
    nodes = grid.nodes
    r = grid.mass(level)
    if not np.any(r > 0):
        raise DegenerateGridError(f"grid has no mass at z = {level}")
    surv, pi = censoring_interval_mass(eta2, nodes, level)
    with np.errstate(divide="ignore"):
        d = np.where(r > 0, surv / np.where(r > 0, r, 1.0), np.inf)
    means = np.ascontiguousarray(outcome.mean(nodes, level, theta), dtype=float)
    design = np.ascontiguousarray(outcome.design(nodes, level), dtype=float)
    sigma = outcome.sigma(theta)
    t, w = gauss_hermite(hermite_order)
    M, B, under = _kernels.assemble_fredholm(
        means, np.ascontiguousarray(r), np.ascontiguousarray(pi), design, sigma,
        np.ascontiguousarray(t), np.ascontiguousarray(w), UNDERFLOW_FLOOR)
    return FredholmSystem(d=d, M=M, B=B, grid=grid, level=level, theta=theta.copy(),
                          interval_mass=pi, underflows=under)


def solve(system: FredholmSystem) -> FredholmSolution:
    """Solve ``A (D + M) = B`` on the nodes carrying positive mass."""
    r = system.masses
    active = (r > 0) & np.isfinite(system.d)
    idx = np.flatnonzero(active)
    K = system.M[np.ix_(idx, idx)] + np.diag(system.d[idx])
    rhs = system.B[:, idx]
    p, m = system.B.shape
    A = np.zeros((p, m))
    if not np.any(rhs):
        return FredholmSolution(A, system.grid, system.level, 0.0, "zero-rhs")
    method = "cholesky"
    try:
        factor = linalg.cho_factor(K, lower=True, check_finite=True)
        sol = linalg.cho_solve(factor, rhs.T)
    except (linalg.LinAlgError, ValueError):
        method = "ldl"
        try:
            sol = linalg.solve(K, rhs.T, assume_a="sym")
        except (linalg.LinAlgError, ValueError) as exc:
            cond = float(np.linalg.cond(K)) if np.all(np.isfinite(K)) else float("inf")
            raise SingularSystemError(f"integral-equation system is singular at z = {system.level}: {exc}",
                                      condition=cond) from None
    A[:, idx] = sol.T
    resid = float(np.max(np.abs(A[:, idx] @ K - rhs)))
    return FredholmSolution(A, system.grid, system.level, resid, method,
                            {"underflows": system.underflows})


@dataclass(frozen=True, eq=False)
class Interpolator:
    """Precomputed bracketing nodes and density ratios for a set of x values."""

    left: np.ndarray
    frac: np.ndarray
    factor: np.ndarray

    def __call__(self, A: np.ndarray) -> np.ndarray:
        """Rows ``a(x_i)`` (n x p) from the p x m node matrix ``A``."""
        lo = A[:, self.left]
        hi = A[:, np.minimum(self.left + 1, A.shape[1] - 1)]
        return ((1.0 - self.frac) * lo + self.frac * hi).T * self.factor[:, None]


def make_interpolator(grid, eta1, x, level) -> Interpolator:
    nodes = grid.nodes
    x = np.atleast_1d(np.asarray(x, float))
    tol = 1e-12 * (nodes[-1] - nodes[0])
    if np.any(x < nodes[0] - tol) or np.any(x > nodes[-1] + tol):
        bad = x[(x < nodes[0] - tol) | (x > nodes[-1] + tol)]
        raise ExtrapolationError(
            f"x = {bad[0]:.6g} is outside the node range [{nodes[0]:.6g}, {nodes[-1]:.6g}]")
    xc = np.clip(x, nodes[0], nodes[-1])
    left = np.clip(np.searchsorted(nodes, xc, side="right") - 1, 0, nodes.size - 2)
    frac = (xc - nodes[left]) / (nodes[left + 1] - nodes[left])
    # exact node hits use that node alone
    on_right = frac >= 1.0
    left = np.where(on_right, left + 1, left)
    frac = np.where(on_right, 0.0, frac)
    total = float(np.sum(eta1.density(nodes, level)))
    dens = np.asarray(eta1.density(xc, level), float)
    with np.errstate(divide="ignore"):
        factor = np.where(dens > 0, total / np.where(dens > 0, dens, 1.0), np.inf)
    return Interpolator(left, frac, factor)


def interpolate_a(solution: FredholmSolution, eta1, x, z) -> np.ndarray:
    """a(x, z, beta) by linear interpolation of ``a r`` between bracketing nodes.

    The interpolated ``a r`` is divided by ``eta1(x, z) / sum_k eta1(x_k, z)``.
    """
    scalar = np.ndim(x) == 0
    out = make_interpolator(solution.grid, eta1, x, z)(solution.A)
    return out[0] if scalar else out
