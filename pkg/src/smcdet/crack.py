"""Paris-Erdogan fatigue crack growth case study.

Closed-form crack length under constant-amplitude loading, a lognormal
multiplicative measurement model, synthetic truth/data generation, and the
prior-envelope rejection sampler used as the reference posterior.

Parameter vector order is fixed as [a0, deltaS, C_ln, m].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import DeteriorationModel
from .priors import (
    ExponentialMarginal,
    MeasurementError,
    NormalMarginal,
    PriorModel,
    lognormal_params_from_moments,
)

__all__ = [
    "CRACK_TRUE_THETA",
    "CrackModel",
    "CrackTruthDataset",
    "InfeasibleRejectionError",
    "crack_length",
    "crack_log_likelihood",
    "crack_measurement_error",
    "crack_prior",
    "generate_crack_dataset",
    "load_crack_dataset",
    "rejection_sample_posterior",
    "save_crack_dataset",
]

# truth used for the synthetic monitoring series
CRACK_TRUE_THETA = np.array([2.0, 50.0, -33.5, 3.7])

N_STEPS = 100
DELTA_N = 1.0e5

# switchover band around the m = 2 singularity of the closed form
_M_SINGULARITY_TOL = 1e-9

_LOG_2PI = math.log(2.0 * math.pi)


class InfeasibleRejectionError(RuntimeError):
    """Rejection sampling acceptance rate collapsed below the feasibility floor."""


def crack_prior() -> PriorModel:
    """Prior over [a0, deltaS, C_ln, m]; (C_ln, m) bi-normal with rho = -0.9."""
    corr = np.eye(4)
    corr[2, 3] = corr[3, 2] = -0.9
    return PriorModel(
        marginals=[
            ExponentialMarginal(mean=1.0),
            NormalMarginal(mean=60.0, std=10.0),
            NormalMarginal(mean=-33.0, std=0.47),
            NormalMarginal(mean=3.5, std=0.3),
        ],
        correlation=corr,
    )


def crack_measurement_error() -> MeasurementError:
    return lognormal_params_from_moments(1.0, 0.1508)


def crack_length(n, theta) -> np.ndarray:
    """Closed-form crack length after n stress cycles.

    Returns NaN where the bracketed base goes non-positive (the crack has
    mathematically diverged before n) or where deltaS^m is undefined.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    a0, ds, c_ln, m = th[:, 0], th[:, 1], th[:, 2], th[:, 3]
    n = np.asarray(n, dtype=float)

    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        one_minus = 1.0 - m / 2.0
        ds_pow = np.where(ds > 0.0, np.power(np.abs(ds), m), np.nan)
        growth = np.exp(c_ln) * ds_pow * np.power(np.pi, m / 2.0)
        base = one_minus * growth * n + np.power(a0, one_minus)
        exponent = np.where(np.abs(one_minus) > _M_SINGULARITY_TOL / 2.0, 1.0 / one_minus, np.nan)
        a = np.where(base > 0.0, np.power(base, exponent), np.nan)
        # m = 2 limit: a0 * exp(exp(C_ln) * deltaS^2 * pi * n)
        singular = np.abs(m - 2.0) < _M_SINGULARITY_TOL
        if np.any(singular):
            a_lim = a0 * np.exp(np.exp(c_ln) * ds**2 * np.pi * n)
            a = np.where(singular, a_lim, a)
    result = np.asarray(a, dtype=float)
    return result if result.ndim else float(result)


def crack_log_likelihood(y, n, theta, err: MeasurementError) -> np.ndarray:
    """Gaussian log-density of ln y around ln a_n(theta) + mu_eps.

    Diverged parameter draws get -inf instead of raising, so particle
    methods survive heavy-tailed proposals.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("measurements must be positive")
    a = np.atleast_1d(crack_length(n, theta))
    with np.errstate(invalid="ignore", divide="ignore"):
        resid = (np.log(y) - err.mu_log - np.log(a)) / err.sigma_log
        ll = -math.log(err.sigma_log) - 0.5 * _LOG_2PI - 0.5 * resid**2
    ll = np.where(np.isfinite(a) & (a > 0.0), ll, -np.inf)
    return ll if np.ndim(theta) > 1 else float(ll[0])


@dataclass
class CrackTruthDataset:
    """Synthetic crack monitoring series y_k at n = k * delta_n."""

    theta_star: np.ndarray
    measurements: np.ndarray
    error: MeasurementError
    seed: int
    delta_n: float = DELTA_N

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        self.measurements = np.asarray(self.measurements, dtype=float)
        if np.any(self.measurements <= 0.0):
            raise ValueError("measurements must be strictly positive")

    @property
    def step_count(self) -> int:
        return self.measurements.size

    def cycles(self, k: int) -> float:
        """Stress cycles at estimation step k (1-based)."""
        return k * self.delta_n

    def true_lengths(self) -> np.ndarray:
        ks = np.arange(1, self.step_count + 1)
        return np.array(
            [crack_length(k * self.delta_n, self.theta_star[None, :])[0] for k in ks]
        )


def generate_crack_dataset(
    theta_star=CRACK_TRUE_THETA,
    err: MeasurementError | None = None,
    seed: int = 0,
    n_steps: int = N_STEPS,
    delta_n: float = DELTA_N,
) -> CrackTruthDataset:
    """Sample y_k = a_k(theta*) * exp(eps_k), eps_k iid N(mu, sigma^2)."""
    err = err or crack_measurement_error()
    theta_star = np.asarray(theta_star, dtype=float)
    rng = np.random.default_rng(seed)
    ks = np.arange(1, n_steps + 1)
    a_true = crack_length(ks[:, None] * delta_n, theta_star[None, :]).ravel()
    if not np.all(np.isfinite(a_true)):
        raise ValueError("truth trajectory diverges within the monitoring horizon")
    eps = rng.normal(err.mu_log, err.sigma_log, size=n_steps)
    return CrackTruthDataset(
        theta_star=theta_star,
        measurements=a_true * np.exp(eps),
        error=err,
        seed=seed,
        delta_n=delta_n,
    )


class CrackModel(DeteriorationModel):
    """Deterioration-model adapter binding the crack law to a dataset."""

    def __init__(self, prior: PriorModel | None = None, err: MeasurementError | None = None):
        super().__init__()
        self.prior = prior or crack_prior()
        self.error = err or crack_measurement_error()

    def predict(self, thetas, k: int, data: CrackTruthDataset) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        self.evaluations += thetas.shape[0]
        return crack_length(data.cycles(k), thetas)

    def step_log_lik(self, thetas, k: int, data: CrackTruthDataset) -> np.ndarray:
        a = self.predict(thetas, k, data)
        y = data.measurements[k - 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            resid = (math.log(y) - self.error.mu_log - np.log(a)) / self.error.sigma_log
            ll = -math.log(self.error.sigma_log) - 0.5 * _LOG_2PI - 0.5 * resid**2
        return np.where(np.isfinite(a) & (a > 0.0), ll, -np.inf)

    def n_steps(self, data: CrackTruthDataset) -> int:
        return data.step_count


def rejection_sample_posterior(
    data: CrackTruthDataset,
    k: int,
    n_samples: int,
    prior: PriorModel | None = None,
    rng: np.random.Generator | None = None,
    batch_size: int = 200_000,
    max_proposals: float = 1e10,
):
    """Independent posterior draws for pi(theta | y_{1:k}) by rejection.

    The prior is the envelope; each proposal is accepted with probability
    exp(sum_j l_j(theta) - k * l_max) where l_max is the per-measurement
    log-density supremum. Returns (samples, acceptance_rate).
    """
    if not 1 <= k <= data.step_count:
        raise ValueError("k outside the measurement horizon")
    prior = prior or crack_prior()
    rng = rng or np.random.default_rng(0)
    err = data.error
    log_sup = -math.log(err.sigma_log) - 0.5 * _LOG_2PI

    accepted = []
    n_accepted = 0
    n_proposed = 0
    while n_accepted < n_samples:
        if n_proposed >= max_proposals:
            raise InfeasibleRejectionError(
                f"acceptance rate {n_accepted / max(n_proposed, 1):.3e} "
                f"after {n_proposed:.0f} proposals"
            )
        theta = prior.sample(batch_size, rng)
        log_acc = np.zeros(batch_size)
        for j in range(1, k + 1):
            log_acc += crack_log_likelihood(
                data.measurements[j - 1], data.cycles(j), theta, err
            )
        log_acc -= k * log_sup
        keep = np.log(rng.random(batch_size)) < log_acc
        accepted.append(theta[keep])
        n_accepted += int(keep.sum())
        n_proposed += batch_size
        if n_proposed >= 1e7 and n_accepted / n_proposed < 1e-8:
            raise InfeasibleRejectionError(
                f"acceptance rate {n_accepted / n_proposed:.3e} below feasibility floor"
            )
    samples = np.concatenate(accepted, axis=0)[:n_samples]
    return samples, n_accepted / n_proposed


def save_crack_dataset(data: CrackTruthDataset, directory) -> None:
    """CSV (k, n, a_true, y) plus a JSON sidecar with truth and seed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_true = data.true_lengths()
    with open(directory / "crack_dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "n", "a_true", "y"])
        for i, y in enumerate(data.measurements, start=1):
            writer.writerow(
                [i, f"{data.cycles(i):.9e}", f"{a_true[i - 1]:.9e}", f"{y:.9e}"]
            )
    sidecar = {
        "theta_star": data.theta_star.tolist(),
        "mu_log": data.error.mu_log,
        "sigma_log": data.error.sigma_log,
        "seed": data.seed,
        "delta_n": data.delta_n,
    }
    (directory / "crack_dataset.json").write_text(json.dumps(sidecar, indent=2))


def load_crack_dataset(directory) -> CrackTruthDataset:
    directory = Path(directory)
    sidecar = json.loads((directory / "crack_dataset.json").read_text())
    ys = []
    with open(directory / "crack_dataset.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ys.append(float(row["y"]))
    return CrackTruthDataset(
        theta_star=np.asarray(sidecar["theta_star"]),
        measurements=np.asarray(ys),
        error=MeasurementError(sidecar["mu_log"], sidecar["sigma_log"]),
        seed=sidecar["seed"],
        delta_n=sidecar["delta_n"],
    )
