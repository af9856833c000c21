"""Error metrics against reference posteriors and ensemble summaries."""

from __future__ import annotations

import numpy as np

from .ensembles import WeightedEnsemble

__all__ = [
    "UndefinedReferenceError",
    "correlation_error_norm",
    "l2_rel_error_norm",
    "pushforward_state",
    "relative_error",
    "weighted_quantile",
    "weighted_quantile_values",
]


class UndefinedReferenceError(ValueError):
    """The reference value is zero; a relative error is undefined."""


def relative_error(ref: float, est: float) -> float:
    """|ref - est| / |ref|."""
    if ref == 0.0:
        raise UndefinedReferenceError("reference value is zero")
    return abs(ref - est) / abs(ref)


def l2_rel_error_norm(ref, est) -> float:
    """sqrt(sum (ref_i - est_i)^2 / sum ref_i^2)."""
    ref = np.asarray(ref, dtype=float)
    est = np.asarray(est, dtype=float)
    if ref.shape != est.shape:
        raise ValueError("reference and estimate must have equal shapes")
    denom = float(np.sum(ref**2))
    if denom == 0.0:
        raise UndefinedReferenceError("all-zero reference vector")
    return float(np.sqrt(np.sum((ref - est) ** 2) / denom))


def correlation_error_norm(ref_corr, est_corr) -> float:
    """L2 relative error over the stacked strict lower triangles.

    The unit diagonal is excluded: it carries no information and would
    dilute the norm.
    """
    ref = np.asarray(ref_corr, dtype=float)
    est = np.asarray(est_corr, dtype=float)
    if ref.shape != est.shape or ref.ndim != 2 or ref.shape[0] != ref.shape[1]:
        raise ValueError("expect two square matrices of equal size")
    rows, cols = np.tril_indices(ref.shape[0], k=-1)
    return l2_rel_error_norm(ref[rows, cols], est[rows, cols])


def weighted_quantile_values(particles, log_weights, p: float) -> np.ndarray:
    """Columnwise weighted quantiles of a particle matrix."""
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    w = np.exp(np.asarray(log_weights, dtype=float))
    out = np.empty(particles.shape[1])
    for j in range(particles.shape[1]):
        order = np.argsort(particles[:, j], kind="stable")
        cdf = np.cumsum(w[order])
        pos = np.searchsorted(cdf, p, side="left")
        pos = min(pos, particles.shape[0] - 1)
        out[j] = particles[order[pos], j]
    return out


def weighted_quantile(ensemble: WeightedEnsemble, index: int, p: float) -> float:
    """Smallest particle value whose cumulative weight reaches p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return float(
        weighted_quantile_values(
            ensemble.particles[:, [index]], ensemble.log_weights, p
        )[0]
    )


def pushforward_state(ensemble: WeightedEnsemble, model, data, steps):
    """Weighted state summaries of the deterioration output per time step.

    Particles whose model output diverges (non-finite) are skipped with
    weight renormalization; the skipped mass fraction is reported and a
    warning flag raised when it exceeds one half.
    """
    results = []
    for k in steps:
        pred = np.atleast_2d(model.predict(ensemble.particles, k, data))
        if pred.ndim == 2 and pred.shape[1] > 1:
            state = pred
        else:
            state = pred.reshape(-1, 1)
        finite = np.all(np.isfinite(state), axis=1)
        w = ensemble.weights[finite]
        diverged_mass = 1.0 - float(w.sum())
        if w.size == 0:
            results.append(
                {"step": k, "mean": None, "q05": None, "q95": None,
                 "diverged_mass": 1.0, "warning": True}
            )
            continue
        w = w / w.sum()
        lw = np.log(np.maximum(w, 1e-300))
        vals = state[finite]
        results.append(
            {
                "step": k,
                "mean": w @ vals,
                "q05": weighted_quantile_values(vals, lw, 0.05),
                "q95": weighted_quantile_values(vals, lw, 0.95),
                "diverged_mass": diverged_mass,
                "warning": diverged_mass > 0.5,
            }
        )
    return results
