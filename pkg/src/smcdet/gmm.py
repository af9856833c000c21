"""Weighted EM fitting, density evaluation and sampling of Gaussian mixtures.

The mixture is the resampling/proposal engine of the filters: it is fitted
on the weighted particle set in standard-normal space and then either
sampled directly (GM resampling) or used as an independent MH proposal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

__all__ = ["GaussianMixture", "GMMFitError", "fit_em"]

_LOG_2PI = math.log(2.0 * math.pi)

# diagonal loading applied at every M-step and at construction
COV_REGULARIZATION = 1e-6


class GMMFitError(RuntimeError):
    """EM could not produce a valid mixture (all components collapsed)."""


def _chol_logdet(cov: np.ndarray):
    chol = linalg.cholesky(cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return chol, logdet


@dataclass
class GaussianMixture:
    """K-component mixture with cached Cholesky factors and log-determinants."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cholesky_factors: np.ndarray = field(init=False)
    log_dets: np.ndarray = field(init=False)
    em_log_likelihood_trace: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None, :, :]
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covariances.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("component weights must be nonnegative and sum to 1")
        self.cholesky_factors = np.empty_like(self.covariances)
        self.log_dets = np.empty(k)
        for i in range(k):
            try:
                chol, logdet = _chol_logdet(self.covariances[i])
            except linalg.LinAlgError:
                self.covariances[i] += COV_REGULARIZATION * np.eye(d)
                chol, logdet = _chol_logdet(self.covariances[i])
            self.cholesky_factors[i] = chol
            self.log_dets[i] = logdet

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, u) -> np.ndarray:
        """Per-component Gaussian log-densities, shape (n, K)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        n = u.shape[0]
        out = np.empty((n, self.n_components))
        for i in range(self.n_components):
            diff = (u - self.means[i]).T
            sol = linalg.solve_triangular(self.cholesky_factors[i], diff, lower=True)
            maha = np.sum(sol**2, axis=0)
            out[:, i] = -0.5 * (self.dim * _LOG_2PI + self.log_dets[i] + maha)
        return out

    def log_density(self, u) -> np.ndarray | float:
        """Mixture log-density: logsumexp of weighted component densities."""
        u_arr = np.asarray(u, dtype=float)
        comp = self.component_log_densities(u_arr)
        vals = logsumexp(comp + np.log(self.weights)[None, :], axis=1)
        return float(vals[0]) if u_arr.ndim == 1 else vals

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n samples: component by weight, then affine standard-normal."""
        if n < 1:
            raise ValueError("need n >= 1")
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for i in range(self.n_components):
            mask = comps == i
            if np.any(mask):
                out[mask] = self.means[i] + z[mask] @ self.cholesky_factors[i].T
        return out

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return (
            np.einsum("k,kij->ij", self.weights, self.covariances)
            + (diff * self.weights[:, None]).T @ diff
        )


def _kmeanspp_centers(samples, weights, k, rng):
    n = samples.shape[0]
    centers = [samples[rng.choice(n, p=weights)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((samples - c) ** 2, axis=1) for c in centers], axis=0
        )
        probs = weights * d2
        total = probs.sum()
        if total <= 0.0:
            probs = weights
            total = probs.sum()
        centers.append(samples[rng.choice(n, p=probs / total)])
    return np.array(centers)


def fit_em(
    samples_u,
    log_weights,
    n_components: int,
    seed,
    max_iter: int = 200,
    tol: float = 1e-6,
    reg: float = COV_REGULARIZATION,
    init_means: np.ndarray | None = None,
) -> GaussianMixture:
    """Fit a Gaussian mixture to weighted samples by EM.

    Particle weights multiply the responsibilities in every E/M sum.
    Components whose responsibility mass drops below 1/n (or whose
    covariance cannot be factorized after regularization) are dropped and
    the remaining component weights renormalized. Deterministic given seed.
    """
    x = np.atleast_2d(np.asarray(samples_u, dtype=float))
    lw = np.asarray(log_weights, dtype=float)
    n, d = x.shape
    if lw.shape != (n,):
        raise ValueError("log_weights length mismatch")
    if abs(logsumexp(lw) - 0.0) > 1e-9:
        raise ValueError("log_weights must be normalized")
    if n_components < 1 or n < n_components * (d + 1):
        raise ValueError("too few samples for the requested component count")
    w = np.exp(lw)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if n_components == 1:
        mu = w @ x
        diff = x - mu
        cov = (diff * w[:, None]).T @ diff + reg * np.eye(d)
        gm = GaussianMixture(np.ones(1), mu[None, :], cov[None, :, :])
        ll = float(np.sum(w * gm.log_density(x)))
        gm.em_log_likelihood_trace = [ll]
        return gm

    if init_means is not None:
        means = np.atleast_2d(np.asarray(init_means, dtype=float)).copy()
        if means.shape != (n_components, d):
            raise ValueError("init_means shape mismatch")
    else:
        means = _kmeanspp_centers(x, w, n_components, rng)
    # sort initial centers so the fit does not depend on selection order
    means = means[np.lexsort(means.T[::-1])]
    global_cov = (x - w @ x).T @ ((x - w @ x) * w[:, None]) + reg * np.eye(d)
    covs = np.repeat(global_cov[None, :, :], n_components, axis=0)
    phis = np.full(n_components, 1.0 / n_components)

    trace: list[float] = []
    prev_ll = -np.inf
    gm = GaussianMixture(phis, means, covs.copy())
    for _ in range(max_iter):
        comp_ld = gm.component_log_densities(x) + np.log(gm.weights)[None, :]
        sample_ld = logsumexp(comp_ld, axis=1)
        ll = float(np.sum(w * sample_ld))
        trace.append(ll)

        log_resp = comp_ld - sample_ld[:, None]
        resp = np.exp(log_resp) * w[:, None]
        mass = resp.sum(axis=0)

        keep = mass >= 1.0 / n
        new_means = []
        new_covs = []
        new_mass = []
        for i in np.flatnonzero(keep):
            mu = resp[:, i] @ x / mass[i]
            diff = x - mu
            cov = (diff * resp[:, i][:, None]).T @ diff / mass[i] + reg * np.eye(d)
            try:
                _chol_logdet(cov)
            except linalg.LinAlgError:
                continue
            new_means.append(mu)
            new_covs.append(cov)
            new_mass.append(mass[i])
        if not new_means:
            raise GMMFitError("all mixture components collapsed")
        if len(new_means) < gm.n_components:
            # component dropped: the monotone-likelihood argument restarts
            trace = []
            prev_ll = -np.inf
        phis = np.asarray(new_mass)
        phis = phis / phis.sum()
        gm = GaussianMixture(phis, np.asarray(new_means), np.asarray(new_covs))

        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll

    gm.em_log_likelihood_trace = trace
    return gm
