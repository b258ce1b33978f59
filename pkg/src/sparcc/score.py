"""Per-record efficient scores and observed-data likelihood scores.

:class:`ScoreContext` binds the outcome model, the two nuisance densities
and the node grid, caches integral-equation solutions per (level, beta),
and evaluates whole datasets at once. Single-record helpers
:func:`s_eff` and :func:`s_mle` wrap the same code paths.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .data import ObservedRecord
from .errors import ConditioningError, TailSupportError
from .fredholm import build_system, make_interpolator, solve
from .quadrature import DEFAULT_HERMITE_ORDER, gauss_legendre

LOG_FLOOR = float(np.log(1e-300))
MLE_TAIL_ORDER = 48


class ScoreContext:
    """Everything needed to evaluate the efficient score at a given beta."""

    def __init__(self, outcome, eta1, eta2, grid, hermite_order: int = DEFAULT_HERMITE_ORDER,
                 mle_order: int = MLE_TAIL_ORDER):
        self.outcome = outcome
        self.eta1 = eta1
        self.eta2 = eta2
        self.grid = grid
        self.hermite_order = hermite_order
        self.mle_order = mle_order
        self._solutions: dict = {}
        self._log_masses = {}
        for level in (grid.levels if grid is not None else ()):
            with np.errstate(divide="ignore"):
                self._log_masses[level] = np.ascontiguousarray(np.log(grid.mass(level)))
        self._prep_key = None
        self._prep = None
        self._mle_key = None
        self._mle_prep = None
        self.underflows = 0
        self.max_residual = 0.0

    # -- integral-equation solutions -------------------------------------
    def solution(self, level: float, theta):
        theta = self.outcome.as_vector(theta)
        key = (float(level), tuple(np.round(theta, 12)))
        sol = self._solutions.get(key)
        if sol is None:
            system = build_system(level, theta, self.grid, self.eta2, self.outcome, self.hermite_order)
            sol = solve(system)
            self.underflows += system.underflows
            self.max_residual = max(self.max_residual, sol.residual_norm)
            if len(self._solutions) > 256:
                self._solutions.clear()
            self._solutions[key] = sol
        return sol

    # -- per-dataset preparation ------------------------------------------
    @staticmethod
    def _same(key, arrays) -> bool:
        return key is not None and all(a is b for a, b in zip(key[:3], arrays[:3])) \
            and np.array_equal(key[3], arrays[3])

    def _prepare(self, y, w, delta, zs):
        key = (y, w, delta, np.array(zs))
        if self._same(self._prep_key, key):
            return self._prep
        nodes = self.grid.nodes
        prep = []
        for level in np.unique(zs):
            level = float(level)
            sel = zs == level
            idx1 = np.flatnonzero(sel & (delta == 1))
            idx0 = np.flatnonzero(sel & (delta == 0))
            bad = idx0[w[idx0] >= nodes[-1]]
            if bad.size:
                raise TailSupportError(
                    f"record {int(bad[0])}: censored w = {w[bad[0]]:.6g} is not below the top node "
                    f"{nodes[-1]:.6g}", record=int(bad[0]))
            interp = make_interpolator(self.grid, self.eta1, w[idx1], level) if idx1.size else None
            prep.append((level, idx1, idx0, interp))
        self._prep_key, self._prep = key, prep
        return prep

    def seff_arrays(self, y, w, delta, zs, theta) -> np.ndarray:
        theta = self.outcome.as_vector(theta)
        y = np.ascontiguousarray(y, float)
        w = np.ascontiguousarray(w, float)
        out = np.empty((y.size, self.outcome.p))
        sigma = self.outcome.sigma(theta)
        inv_s2 = 1.0 / (sigma * sigma)
        nodes = self.grid.nodes
        for level, idx1, idx0, interp in self._prepare(y, w, delta, zs):
            sol = self.solution(level, theta)
            if idx1.size:
                out[idx1] = self.outcome.score_full(y[idx1], w[idx1], level, theta) - interp(sol.A)
            if idx0.size:
                means = np.ascontiguousarray(self.outcome.mean(nodes, level, theta))
                W, log_denom = _kernels.tail_weights(y[idx0], w[idx0], nodes, self._log_masses[level],
                                                     means, sigma)
                if np.any(log_denom < LOG_FLOOR):
                    k = int(idx0[np.argmin(log_denom)])
                    raise ConditioningError(f"record {k}: tail denominator underflows")
                R = y[idx0, None] - means[None, :]
                X = self.outcome.design(nodes, level)
                WR = W * R
                lin = (WR @ X) * inv_s2
                var = -0.5 + 0.5 * inv_s2 * np.einsum("ij,ij->i", WR, R)
                out[idx0, :-1] = lin
                out[idx0, -1] = var
                out[idx0] -= W @ sol.a_nodes.T
        return out

    def seff_matrix(self, dataset, theta) -> np.ndarray:
        """n x p matrix of efficient scores."""
        return self.seff_arrays(dataset.y, dataset.w, dataset.delta, dataset.zs, theta)

    # -- observed-data likelihood (MLE comparator) -------------------------
    def _prepare_mle(self, y, w, delta, zs):
        key = (y, w, delta, np.array(zs))
        if self._same(self._mle_key, key):
            return self._mle_prep
        hi = self.eta1.support[1]
        t, g = gauss_legendre(self.mle_order)
        idx0 = np.flatnonzero(delta == 0)
        span = np.maximum(hi - w[idx0], 0.0)
        xq = w[idx0, None] + span[:, None] * t[None, :]
        logv = np.empty_like(xq)
        for level in np.unique(zs[idx0]):
            sel = zs[idx0] == level
            with np.errstate(divide="ignore"):
                logv[sel] = np.log(span[sel, None] * g[None, :] * self.eta1.density(xq[sel], level))
        prep = (np.flatnonzero(delta == 1), idx0, xq, logv)
        self._mle_key, self._mle_prep = key, prep
        return prep

    def _mle_tail(self, y, zs, idx0, xq, logv, theta):
        ll = self.outcome.log_density(y[idx0, None], xq, zs[idx0, None], theta) + logv
        top = np.max(ll, axis=1)
        if np.any(~np.isfinite(top)) or np.any(top < LOG_FLOOR):
            k = int(idx0[np.argmin(top)])
            raise ConditioningError(f"record {k}: censored likelihood underflows")
        Wt = np.exp(ll - top[:, None])
        tot = Wt.sum(axis=1)
        return Wt / tot[:, None], top + np.log(tot)

    def smle_arrays(self, y, w, delta, zs, theta) -> np.ndarray:
        theta = self.outcome.as_vector(theta)
        y = np.asarray(y, float)
        w = np.asarray(w, float)
        idx1, idx0, xq, logv = self._prepare_mle(y, w, delta, zs)
        out = np.empty((y.size, self.outcome.p))
        out[idx1] = self.outcome.score_full(y[idx1], w[idx1], zs[idx1], theta)
        if idx0.size:
            Wt, _ = self._mle_tail(y, zs, idx0, xq, logv, theta)
            S = self.outcome.score_full(y[idx0, None], xq, zs[idx0, None], theta)
            out[idx0] = np.einsum("iq,iqp->ip", Wt, S)
        return out

    def smle_matrix(self, dataset, theta) -> np.ndarray:
        return self.smle_arrays(dataset.y, dataset.w, dataset.delta, dataset.zs, theta)

    def mle_loglik_arrays(self, y, w, delta, zs, theta) -> np.ndarray:
        """Per-record beta-dependent part of the observed-data log-likelihood."""
        theta = self.outcome.as_vector(theta)
        y = np.asarray(y, float)
        w = np.asarray(w, float)
        idx1, idx0, xq, logv = self._prepare_mle(y, w, delta, zs)
        out = np.empty(y.size)
        out[idx1] = self.outcome.log_density(y[idx1], w[idx1], zs[idx1], theta)
        if idx0.size:
            _, logden = self._mle_tail(y, zs, idx0, xq, logv, theta)
            out[idx0] = logden
        return out

    def mle_loglik(self, dataset, theta) -> np.ndarray:
        return self.mle_loglik_arrays(dataset.y, dataset.w, dataset.delta, dataset.zs, theta)


def _record_arrays(record: ObservedRecord):
    if len(record.z) != 1:
        raise ValueError("only scalar z is supported")
    return (np.array([record.y]), np.array([record.w]), np.array([record.delta]),
            np.array([float(record.z[0])]))


def s_eff(record: ObservedRecord, ctx: ScoreContext, theta) -> np.ndarray:
    """Efficient score of one record at ``theta``."""
    y, w, d, z = _record_arrays(record)
    ctx._prep_key = None
    return ctx.seff_arrays(y, w, d, z, theta)[0]


def s_mle(record: ObservedRecord, ctx: ScoreContext, theta) -> np.ndarray:
    """Observed-data likelihood score of one record at ``theta``."""
    y, w, d, z = _record_arrays(record)
    ctx._mle_key = None
    return ctx.smle_arrays(y, w, d, z, theta)[0]
