"""Normal linear outcome model for Y given (X, Z).

Parameters are handled internally as a flat vector
``theta = (beta0, beta1, beta2[, beta3], log_sigma2)``; the variance is
carried on the log scale so root-finding is unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RegressionParams:
    beta0: float
    beta1: float
    beta2: float
    beta3: float = 0.0
    log_sigma2: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.to_vector(True))):
            raise ValueError("regression parameters must be finite")

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2))

    def to_vector(self, interaction: bool = False) -> np.ndarray:
        if interaction:
            return np.array([self.beta0, self.beta1, self.beta2, self.beta3, self.log_sigma2])
        return np.array([self.beta0, self.beta1, self.beta2, self.log_sigma2])

    @classmethod
    def from_vector(cls, theta) -> "RegressionParams":
        theta = [float(v) for v in theta]
        if len(theta) == 4:
            return cls(theta[0], theta[1], theta[2], 0.0, theta[3])
        if len(theta) == 5:
            return cls(*theta)
        raise ValueError(f"expected 4 or 5 parameters, got {len(theta)}")

    def names(self, interaction: bool = False) -> list[str]:
        return param_names(interaction)


def param_names(interaction: bool = False) -> list[str]:
    if interaction:
        return ["beta0", "beta1", "beta2", "beta3", "log_sigma2"]
    return ["beta0", "beta1", "beta2", "log_sigma2"]


class NormalOutcome:
    """Y | X, Z ~ Normal(beta0 + beta1 X + beta2 Z [+ beta3 X Z], sigma^2)."""

    family = "normal"

    def __init__(self, interaction: bool = False):
        self.interaction = bool(interaction)

    def __repr__(self):
        return f"NormalOutcome(interaction={self.interaction})"

    @property
    def p(self) -> int:
        return 5 if self.interaction else 4

    def names(self) -> list[str]:
        return param_names(self.interaction)

    def as_vector(self, params) -> np.ndarray:
        if isinstance(params, RegressionParams):
            if not self.interaction and params.beta3 != 0.0:
                raise ValueError("beta3 is nonzero but the interaction term is disabled")
            return params.to_vector(self.interaction)
        theta = np.asarray(params, dtype=float)
        if theta.shape != (self.p,):
            raise ValueError(f"expected {self.p} parameters, got shape {theta.shape}")
        return theta

    def design(self, x, z) -> np.ndarray:
        """Mean-model design rows, shape ``broadcast(x, z).shape + (p - 1,)``."""
        x, z = np.broadcast_arrays(np.asarray(x, float), np.asarray(z, float))
        cols = [np.ones_like(x), x, z]
        if self.interaction:
            cols.append(x * z)
        return np.stack(cols, axis=-1)

    def mean(self, x, z, params):
        theta = self.as_vector(params)
        return self.design(x, z) @ theta[:-1]

    @staticmethod
    def sigma(params) -> float:
        theta = params.to_vector(True) if isinstance(params, RegressionParams) else np.asarray(params)
        return float(np.exp(0.5 * theta[-1]))

    def log_density(self, y, x, z, params):
        theta = self.as_vector(params)
        r = np.asarray(y, float) - self.mean(x, z, theta)
        return -0.5 * (LOG_2PI + theta[-1]) - 0.5 * r * r * np.exp(-theta[-1])

    def density(self, y, x, z, params):
        return np.exp(self.log_density(y, x, z, params))

    def score_full(self, y, x, z, params) -> np.ndarray:
        """Gradient of :meth:`log_density` in theta; last axis has length p."""
        theta = self.as_vector(params)
        X = self.design(x, z)
        r = np.asarray(y, float) - X @ theta[:-1]
        inv_s2 = np.exp(-theta[-1])
        lin = (r * inv_s2)[..., None] * X
        var = (-0.5 + 0.5 * r * r * inv_s2)[..., None]
        return np.concatenate([lin, var], axis=-1)
