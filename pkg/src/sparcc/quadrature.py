"""Quadrature rules and the node grid used to discretize the covariate.

Gauss-Hermite handles integrals against the normal outcome density,
composite Simpson handles bounded one-dimensional integrals, and
:class:`QuadratureGrid` carries the equally spaced nodes together with
per-level point masses proportional to the covariate density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DegenerateGridError, PreconditionError

DEFAULT_NODES = 50
DEFAULT_HERMITE_ORDER = 20
DEFAULT_SIMPSON_PANELS = 2000

# names of deliberately broken rules, used by the self-test's fault injection
_FAULTS: set[str] = set()


@lru_cache(maxsize=32)
def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[f(Z)], Z ~ N(0, 1).

    Returned nodes are already scaled by sqrt(2) and weights divided by
    sqrt(pi), so ``sum(w * f(t))`` approximates the standard normal mean.
    """
    if order < 2:
        raise PreconditionError("Gauss-Hermite order must be at least 2")
    t, w = np.polynomial.hermite.hermgauss(order)
    t = np.sqrt(2.0) * t
    w = w / np.sqrt(np.pi)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


@lru_cache(maxsize=32)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def integrate_y_hermite(f, mean: float, sd: float, order: int = DEFAULT_HERMITE_ORDER) -> float:
    """Approximate the integral of ``f(y)`` against the N(mean, sd^2) density."""
    if sd <= 0:
        raise PreconditionError("sd must be positive")
    t, w = gauss_hermite(order)
    vals = np.asarray(f(mean + sd * t), dtype=float)
    return float(np.tensordot(w, vals, axes=(0, 0)))


def simpson_weights(lo: float, hi: float, panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Simpson abscissae and weights for ``panels`` (even) subintervals."""
    if panels < 2 or panels % 2:
        raise PreconditionError("Simpson needs an even number of panels, at least 2")
    if not lo < hi:
        raise PreconditionError("Simpson needs lo < hi")
    x = np.linspace(lo, hi, panels + 1)
    w = np.full(panels + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    if "simpson" in _FAULTS:
        w[1::2] = 3.0
    return x, w * (hi - lo) / (3.0 * panels)


def integrate_simpson(f, lo: float, hi: float, panels: int = DEFAULT_SIMPSON_PANELS) -> float:
    x, w = simpson_weights(lo, hi, panels)
    return float(np.dot(w, np.asarray(f(x), dtype=float) * np.ones_like(x)))


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Equally spaced nodes with point masses ``r_j(z)`` per z level."""

    nodes: np.ndarray
    masses: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3 or np.any(np.diff(nodes) <= 0):
            raise PreconditionError("grid nodes must be a strictly increasing vector of length >= 3")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        frozen = {}
        for level, r in self.masses.items():
            r = np.array(r, dtype=float)
            r.setflags(write=False)
            frozen[float(level)] = r
        object.__setattr__(self, "masses", frozen)

    @property
    def m(self) -> int:
        return self.nodes.size

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(self.masses)

    def mass(self, level: float) -> np.ndarray:
        return self.masses[float(level)]

    def expectation(self, g, level: float) -> float:
        """Grid-sum expectation of ``g`` at one level."""
        return float(np.dot(self.mass(level), g(self.nodes)))


def default_support(w: np.ndarray, upper: float = 1.0) -> tuple[float, float]:
    """Node range covering every observed w, with the top node above the largest w.

    The top node sits halfway between max(w) and the upper end of the
    covariate support so every censored record has at least one node
    strictly above it.
    """
    w = np.asarray(w, dtype=float)
    lo = float(np.min(w))
    hi = float(0.5 * (np.max(w) + upper))
    if not lo < hi:
        raise PreconditionError("cannot build a grid: observed w range is empty")
    return lo, hi


def make_grid(eta1, z_levels, m: int = DEFAULT_NODES, support: tuple[float, float] | None = None) -> QuadratureGrid:
    """Nodes ``linspace(lo, hi, m)`` and masses ``eta1(x_j, z) / sum_k eta1(x_k, z)``."""
    if m < 3:
        raise PreconditionError("the grid needs at least 3 nodes")
    if support is None:
        s_lo, s_hi = eta1.support
        pad = (s_hi - s_lo) / (2.0 * m)
        support = (s_lo + pad, s_hi - pad)
    lo, hi = support
    s_lo, s_hi = eta1.support
    if lo < s_lo or hi > s_hi or not lo < hi:
        raise PreconditionError(f"grid support {support} is not inside the density support {eta1.support}")
    nodes = np.linspace(lo, hi, m)
    masses = {}
    for level in z_levels:
        level = float(np.ravel([level])[0])
        dens = np.asarray(eta1.density(nodes, level), dtype=float)
        total = dens.sum()
        if not np.isfinite(total) or total <= 0:
            raise DegenerateGridError(f"covariate density is zero on every node at z = {level}")
        masses[level] = dens / total
    return QuadratureGrid(nodes, masses)
