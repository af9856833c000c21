"""Weighted particle ensembles and log-space weight arithmetic.

All importance weights are carried as log-weights and manipulated with
logsumexp so that extremely peaked likelihoods do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DegenerateWeightsError",
    "WeightedEnsemble",
    "ess",
    "normalize_log_weights",
    "resample_multinomial",
    "uniform_log_weights",
]

# exp(sum of normalized weights) must hit 1 within this tolerance
_NORMALIZATION_TOL = 1e-9


class DegenerateWeightsError(RuntimeError):
    """All particles carry zero weight (likelihood vanished everywhere)."""


def uniform_log_weights(n: int) -> np.ndarray:
    return np.full(n, -np.log(n))


def normalize_log_weights(log_weights) -> np.ndarray:
    """Shift log-weights so their exponentials sum to one.

    Raises
    ------
    DegenerateWeightsError
        If no entry is finite, i.e. every particle has zero weight.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.ndim != 1 or lw.size == 0:
        raise ValueError("log_weights must be a non-empty 1-d array")
    if not np.any(lw > -np.inf):
        raise DegenerateWeightsError("all log-weights are -inf")
    return lw - logsumexp(lw)


def ess(log_weights) -> float:
    """Effective sample size 1 / sum(w_i^2) of normalized log-weights."""
    lw = np.asarray(log_weights, dtype=float)
    total = logsumexp(lw)
    if not np.isfinite(total) or abs(total) > _NORMALIZATION_TOL:
        raise ValueError("ess expects normalized log-weights")
    return float(np.exp(-logsumexp(2.0 * lw)))


@dataclass
class WeightedEnsemble:
    """Particle set {theta_i, w_i} with optional cached log-likelihoods.

    ``particles`` has one row per particle (physical parameter units);
    ``log_weights`` is normalized; ``log_likelihoods`` carries the running
    log L(y_{1:n} | theta_i) where a filter needs it.
    """

    particles: np.ndarray
    log_weights: np.ndarray
    log_likelihoods: np.ndarray | None = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        n, d = self.particles.shape
        if n < 2 or d < 1:
            raise ValueError("ensemble needs >= 2 particles of dimension >= 1")
        if not np.all(np.isfinite(self.particles)):
            raise ValueError("particles contain NaN or infinite entries")
        if self.log_weights.shape != (n,):
            raise ValueError("log_weights length does not match particle count")
        total = logsumexp(self.log_weights)
        if abs(total) > _NORMALIZATION_TOL:
            raise ValueError("log_weights are not normalized")
        if self.log_likelihoods is not None:
            self.log_likelihoods = np.asarray(self.log_likelihoods, dtype=float)
            if self.log_likelihoods.shape != (n,):
                raise ValueError("cached log-likelihood length mismatch")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def ess(self) -> float:
        return ess(self.log_weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def cov(self) -> np.ndarray:
        w = self.weights
        diff = self.particles - w @ self.particles
        return (diff * w[:, None]).T @ diff

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov()), 0.0, None))

    def corr(self) -> np.ndarray:
        c = self.cov()
        s = np.sqrt(np.clip(np.diag(c), 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = c / np.outer(s, s)
        r[~np.isfinite(r)] = 0.0
        np.fill_diagonal(r, 1.0)
        return np.clip(r, -1.0, 1.0)

    def reweighted(self, log_weights) -> "WeightedEnsemble":
        return replace(self, log_weights=normalize_log_weights(log_weights))


def resample_multinomial(ensemble: WeightedEnsemble, rng: np.random.Generator) -> WeightedEnsemble:
    """Draw N particles with replacement according to the weights.

    Output weights are reset to uniform; cached log-likelihoods follow the
    drawn particle indices.
    """
    n = ensemble.n_particles
    idx = rng.choice(n, size=n, replace=True, p=ensemble.weights)
    cached = None
    if ensemble.log_likelihoods is not None:
        cached = ensemble.log_likelihoods[idx]
    return WeightedEnsemble(
        particles=ensemble.particles[idx],
        log_weights=uniform_log_weights(n),
        log_likelihoods=cached,
    )
