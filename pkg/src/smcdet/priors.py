"""Prior models, marginal distributions and the map to standard-normal space.

The parameter vector theta is coupled to an independent standard-normal
vector u through a Gaussian-copula map: componentwise z_i = Phi^-1(F_i(theta_i))
followed by whitening with the Cholesky factor of the underlying-Gaussian
correlation matrix. Mixture fitting and MCMC moves all happen in u-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

__all__ = [
    "ExponentialMarginal",
    "LognormalMarginal",
    "MeasurementError",
    "NormalMarginal",
    "PriorModel",
    "lognormal_params_from_moments",
    "log_prior_density_u",
]

# Phi^-1 argument clamp; keeps the transform total on machine floats
_CDF_EPS = 1e-15

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MeasurementError:
    """Log-scale parameters (mu, sigma) of a multiplicative lognormal error."""

    mu_log: float
    sigma_log: float

    def __post_init__(self):
        if self.sigma_log <= 0.0:
            raise ValueError("sigma_log must be positive")


def lognormal_params_from_moments(mean: float, std: float) -> MeasurementError:
    """Convert mean/std of a lognormal variable to its log-scale parameters."""
    if mean <= 0.0 or std <= 0.0:
        raise ValueError("lognormal mean and std must be positive")
    sigma_log = math.sqrt(math.log1p((std / mean) ** 2))
    mu_log = math.log(mean) - 0.5 * sigma_log**2
    return MeasurementError(mu_log=mu_log, sigma_log=sigma_log)


@dataclass(frozen=True)
class NormalMarginal:
    mean: float
    std: float

    def to_z(self, theta):
        return (np.asarray(theta, float) - self.mean) / self.std

    def from_z(self, z):
        return self.mean + self.std * np.asarray(z, float)

    def contains(self, theta):
        return np.isfinite(np.asarray(theta, float))


@dataclass(frozen=True)
class LognormalMarginal:
    """Lognormal given by mean/std of the variable itself."""

    mean: float
    std: float

    @property
    def log_params(self) -> MeasurementError:
        return lognormal_params_from_moments(self.mean, self.std)

    def to_z(self, theta):
        theta = np.asarray(theta, float)
        p = self.log_params
        return (np.log(theta) - p.mu_log) / p.sigma_log

    def from_z(self, z):
        p = self.log_params
        return np.exp(p.mu_log + p.sigma_log * np.asarray(z, float))

    def contains(self, theta):
        theta = np.asarray(theta, float)
        return np.isfinite(theta) & (theta > 0.0)


@dataclass(frozen=True)
class ExponentialMarginal:
    mean: float

    def to_z(self, theta):
        theta = np.asarray(theta, float)
        cdf = -np.expm1(-theta / self.mean)
        return stats.norm.ppf(np.clip(cdf, _CDF_EPS, 1.0 - _CDF_EPS))

    def from_z(self, z):
        cdf = stats.norm.cdf(np.asarray(z, float))
        cdf = np.clip(cdf, _CDF_EPS, 1.0 - _CDF_EPS)
        return -self.mean * np.log1p(-cdf)

    def contains(self, theta):
        theta = np.asarray(theta, float)
        return np.isfinite(theta) & (theta > 0.0)


@dataclass
class PriorModel:
    """Marginals plus a correlation matrix in underlying-Gaussian space."""

    marginals: list
    correlation: np.ndarray | None = None
    cholesky_factor: np.ndarray = field(init=False)

    def __post_init__(self):
        d = len(self.marginals)
        if self.correlation is None:
            self.correlation = np.eye(d)
        self.correlation = np.asarray(self.correlation, dtype=float)
        if self.correlation.shape != (d, d):
            raise ValueError("correlation matrix shape mismatch")
        if not np.allclose(self.correlation, self.correlation.T, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(self.correlation), 1.0, atol=1e-12):
            raise ValueError("correlation matrix must have unit diagonal")
        try:
            self.cholesky_factor = linalg.cholesky(self.correlation, lower=True)
        except linalg.LinAlgError:
            jittered = self.correlation + 1e-10 * np.eye(d)
            self.cholesky_factor = linalg.cholesky(jittered, lower=True)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def _check_support(self, theta: np.ndarray):
        for j, marg in enumerate(self.marginals):
            if not np.all(marg.contains(theta[..., j])):
                raise ValueError(f"component {j} outside marginal support")

    def to_u(self, theta) -> np.ndarray:
        """Map physical parameters to independent standard-normal space."""
        theta = np.asarray(theta, dtype=float)
        self._check_support(theta)
        z = np.stack(
            [m.to_z(theta[..., j]) for j, m in enumerate(self.marginals)], axis=-1
        )
        return linalg.solve_triangular(self.cholesky_factor, z.T, lower=True).T

    def from_u(self, u) -> np.ndarray:
        """Inverse of :meth:`to_u`."""
        u = np.asarray(u, dtype=float)
        z = (self.cholesky_factor @ u.T).T
        return np.stack(
            [m.from_z(z[..., j]) for j, m in enumerate(self.marginals)], axis=-1
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n prior samples in physical space."""
        return self.from_u(rng.standard_normal((n, self.dim)))


def log_prior_density_u(u) -> np.ndarray | float:
    """Standard-normal log-density at u (the prior density in u-space)."""
    u = np.asarray(u, dtype=float)
    d = u.shape[-1] if u.ndim > 0 else 1
    val = -0.5 * d * _LOG_2PI - 0.5 * np.sum(np.atleast_2d(u) ** 2, axis=-1)
    return float(val[0]) if u.ndim <= 1 else val
