"""Spatially distributed corrosion case study.

A power-law deterioration D(t) = A t^B with lognormal field A and normal
field B along a beam, discretized by the midpoint method. The parameter
vector is theta = [ln A_1..m, B_1..m], which makes the prior jointly
Gaussian and the Kalman-filter reference in log scale exact.

The beam is taken 10 m long with ten canonical sensor positions at the
midpoints of ten equal segments; this geometry is an assumption (the
source setting leaves it open) and all reference numbers are internal.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .models import DeteriorationModel
from .priors import (
    MeasurementError,
    NormalMarginal,
    PriorModel,
    lognormal_params_from_moments,
)

__all__ = [
    "BEAM_LENGTH",
    "CANONICAL_SENSOR_POSITIONS",
    "CorrosionDataset",
    "CorrosionModel",
    "SensorLayout",
    "build_prior",
    "corrosion_depth",
    "corrosion_log_likelihood",
    "corrosion_measurement_error",
    "element_midpoints",
    "generate_corrosion_truth",
    "kalman_reference",
    "load_corrosion_dataset",
    "make_sensor_layout",
    "save_corrosion_dataset",
    "save_kalman_reference",
]

BEAM_LENGTH = 10.0
CORRELATION_LENGTH = 2.0
N_YEARS = 50

# midpoints of ten equal segments of the 10 m beam
CANONICAL_SENSOR_POSITIONS = np.arange(0.5, 10.0, 1.0)

# canonical subsets: 2 sensors = {4th, 7th}, 4 sensors = {1st, 4th, 7th, 10th}
_SENSOR_SUBSETS = {2: [3, 6], 4: [0, 3, 6, 9], 10: list(range(10))}

_LOG_2PI = math.log(2.0 * math.pi)


def corrosion_measurement_error() -> MeasurementError:
    return lognormal_params_from_moments(1.0, 0.101)


def element_midpoints(m: int, beam_length: float = BEAM_LENGTH) -> np.ndarray:
    h = beam_length / m
    return (np.arange(m) + 0.5) * h


def exponential_correlation(points, corr_length: float = CORRELATION_LENGTH) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.exp(-np.abs(points[:, None] - points[None, :]) / corr_length)


def build_prior(
    m: int,
    beam_length: float = BEAM_LENGTH,
    corr_length: float = CORRELATION_LENGTH,
    a_mean: float = 0.8,
    a_std: float = 0.24,
    b_mean: float = 0.8,
    b_std: float = 0.12,
) -> PriorModel:
    """Gaussian prior over [ln A_1..m, B_1..m] on the midpoint grid.

    Both fields carry the exponential correlation model; the ln A and B
    blocks are mutually independent.
    """
    if m < 1:
        raise ValueError("need at least one element")
    mids = element_midpoints(m, beam_length)
    block = exponential_correlation(mids, corr_length)
    corr = linalg.block_diag(block, block)
    ln_a = lognormal_params_from_moments(a_mean, a_std)
    marginals = [NormalMarginal(ln_a.mu_log, ln_a.sigma_log) for _ in range(m)]
    marginals += [NormalMarginal(b_mean, b_std) for _ in range(m)]
    return PriorModel(marginals=marginals, correlation=corr)


@dataclass(frozen=True)
class SensorLayout:
    """Sensor coordinates and their enclosing midpoint-grid elements."""

    positions: np.ndarray
    element_index: np.ndarray

    @property
    def n_sensors(self) -> int:
        return len(self.positions)


def make_sensor_layout(
    n_sensors: int, m: int, beam_length: float = BEAM_LENGTH
) -> SensorLayout:
    if n_sensors not in _SENSOR_SUBSETS:
        raise ValueError("supported sensor counts: 2, 4, 10")
    pos = CANONICAL_SENSOR_POSITIONS[_SENSOR_SUBSETS[n_sensors]]
    h = beam_length / m
    raw = pos / h
    idx = np.floor(raw).astype(int)
    # a sensor exactly on an element boundary belongs to the lower element
    on_boundary = np.isclose(raw, np.round(raw)) & (idx > 0) & (np.round(raw) == idx)
    idx = np.where(on_boundary, idx - 1, idx)
    idx = np.clip(idx, 0, m - 1)
    return SensorLayout(positions=pos, element_index=idx)


def corrosion_depth(theta, t: float, element: int) -> np.ndarray:
    """D(t) = A t^B at the element holding the queried location."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    m = th.shape[1] // 2
    ln_a = th[:, element]
    b = th[:, m + element]
    return np.exp(ln_a) * t**b


def corrosion_log_likelihood(
    log_y, t: float, theta, layout: SensorLayout, err: MeasurementError
) -> np.ndarray:
    """Sum over sensors of Gaussian log-densities of ln y at year t."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    log_y = np.asarray(log_y, dtype=float)
    m = th.shape[1] // 2
    idx = layout.element_index
    mean = th[:, idx] + th[:, m + idx] * math.log(t) + err.mu_log
    resid = (log_y[None, :] - mean) / err.sigma_log
    per_sensor = -math.log(err.sigma_log) - 0.5 * _LOG_2PI - 0.5 * resid**2
    return per_sensor.sum(axis=1)


@dataclass
class CorrosionDataset:
    """Fifty years of log-scale sensor measurements plus the fine-grid truth."""

    log_measurements: np.ndarray  # (50, 10) ln y for the canonical sensors
    truth_grid: np.ndarray  # fine grid coordinates
    truth_ln_a: np.ndarray
    truth_b: np.ndarray
    error: MeasurementError
    seed: int

    @property
    def n_years(self) -> int:
        return self.log_measurements.shape[0]

    def for_layout(self, layout: SensorLayout) -> np.ndarray:
        """Measurement columns for the given sensor subset."""
        cols = [
            int(np.argmin(np.abs(CANONICAL_SENSOR_POSITIONS - p)))
            for p in layout.positions
        ]
        return self.log_measurements[:, cols]


def generate_corrosion_truth(
    seed: int = 0,
    n_modes: int = 400,
    n_grid: int = 2000,
    beam_length: float = BEAM_LENGTH,
    corr_length: float = CORRELATION_LENGTH,
    a_mean: float = 0.8,
    a_std: float = 0.24,
    b_mean: float = 0.8,
    b_std: float = 0.12,
    n_years: int = N_YEARS,
) -> CorrosionDataset:
    """Synthesize truth fields from a truncated spectral expansion.

    The covariance operator of the exponential kernel is eigendecomposed
    numerically on a fine uniform grid and the leading modes are combined
    with independent standard-normal coefficients; measurements then follow
    the log-scale measurement equation at the canonical sensor positions.
    """
    if n_modes > n_grid:
        raise ValueError("cannot use more modes than grid nodes")
    rng = np.random.default_rng(seed)
    grid = (np.arange(n_grid) + 0.5) * (beam_length / n_grid)
    corr = exponential_correlation(grid, corr_length)
    eigvals, eigvecs = linalg.eigh(corr)
    if np.any(~np.isfinite(eigvals)):
        raise RuntimeError("eigendecomposition of the field covariance failed")
    order = np.argsort(eigvals)[::-1][:n_modes]
    lam = np.clip(eigvals[order], 0.0, None)
    phi = eigvecs[:, order]
    basis = phi * np.sqrt(lam)[None, :]

    ln_a_params = lognormal_params_from_moments(a_mean, a_std)
    z_a = basis @ rng.standard_normal(n_modes)
    z_b = basis @ rng.standard_normal(n_modes)
    truth_ln_a = ln_a_params.mu_log + ln_a_params.sigma_log * z_a
    truth_b = b_mean + b_std * z_b

    err = corrosion_measurement_error()
    sensor_nodes = [int(np.argmin(np.abs(grid - p))) for p in CANONICAL_SENSOR_POSITIONS]
    years = np.arange(1, n_years + 1)
    ln_d = (
        truth_ln_a[sensor_nodes][None, :]
        + np.outer(np.log(years), truth_b[sensor_nodes])
    )
    noise = rng.normal(err.mu_log, err.sigma_log, size=ln_d.shape)
    return CorrosionDataset(
        log_measurements=ln_d + noise,
        truth_grid=grid,
        truth_ln_a=truth_ln_a,
        truth_b=truth_b,
        error=err,
        seed=seed,
    )


class CorrosionModel(DeteriorationModel):
    """Adapter binding the power-law depth model to a sensor layout."""

    def __init__(self, m: int, layout: SensorLayout, prior: PriorModel | None = None):
        super().__init__()
        self.m = m
        self.layout = layout
        self.prior = prior or build_prior(m)
        self.error = corrosion_measurement_error()

    def predict(self, thetas, k: int, data: CorrosionDataset) -> np.ndarray:
        """Depths at the sensor elements in year k, shape (n, n_sensors)."""
        th = np.atleast_2d(thetas)
        self.evaluations += th.shape[0]
        idx = self.layout.element_index
        return np.exp(th[:, idx]) * float(k) ** th[:, self.m + idx]

    def step_log_lik(self, thetas, k: int, data: CorrosionDataset) -> np.ndarray:
        th = np.atleast_2d(thetas)
        self.evaluations += th.shape[0]
        log_y = data.for_layout(self.layout)[k - 1]
        return corrosion_log_likelihood(log_y, float(k), th, self.layout, self.error)

    def n_steps(self, data: CorrosionDataset) -> int:
        return data.n_years


def _observation_matrix(m: int, layout: SensorLayout, t: float) -> np.ndarray:
    h = np.zeros((layout.n_sensors, 2 * m))
    for row, elem in enumerate(layout.element_index):
        h[row, elem] = 1.0
        h[row, m + elem] = math.log(t)
    return h


def kalman_reference(
    data: CorrosionDataset, prior: PriorModel, layout: SensorLayout
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact sequential Gaussian posteriors (mean, covariance) per year.

    Zero process noise; the observation offset carries the log-scale error
    mean, the noise variance is sigma_eps^2 per sensor, independent.
    """
    m = prior.dim // 2
    err = data.error
    mean = np.array([marg.mean for marg in prior.marginals], dtype=float)
    stds = np.array([marg.std for marg in prior.marginals], dtype=float)
    cov = prior.correlation * np.outer(stds, stds)
    log_meas = data.for_layout(layout)

    out = []
    for k in range(1, data.n_years + 1):
        h = _observation_matrix(m, layout, float(k))
        z = log_meas[k - 1] - err.mu_log
        s = h @ cov @ h.T + err.sigma_log**2 * np.eye(layout.n_sensors)
        try:
            gain = cov @ h.T @ linalg.inv(s)
        except linalg.LinAlgError as exc:
            raise RuntimeError("singular innovation covariance") from exc
        mean = mean + gain @ (z - h @ mean)
        joseph = np.eye(2 * m) - gain @ h
        cov = joseph @ cov @ joseph.T + err.sigma_log**2 * (gain @ gain.T)
        cov = 0.5 * (cov + cov.T)
        out.append((mean.copy(), cov.copy()))
    return out


def save_corrosion_dataset(data: CorrosionDataset, directory) -> None:
    """CSV (year, sensor, ln_y) plus a JSON sidecar with geometry and truth."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "corrosion_dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "sensor", "ln_y"])
        for year in range(1, data.n_years + 1):
            for sensor in range(data.log_measurements.shape[1]):
                writer.writerow(
                    [year, sensor + 1, f"{data.log_measurements[year - 1, sensor]:.9e}"]
                )
    sidecar = {
        "seed": data.seed,
        "mu_log": data.error.mu_log,
        "sigma_log": data.error.sigma_log,
        "sensor_positions": CANONICAL_SENSOR_POSITIONS.tolist(),
        "truth_grid": data.truth_grid.tolist(),
        "truth_ln_a": data.truth_ln_a.tolist(),
        "truth_b": data.truth_b.tolist(),
    }
    (directory / "corrosion_dataset.json").write_text(json.dumps(sidecar))


def load_corrosion_dataset(directory) -> CorrosionDataset:
    directory = Path(directory)
    sidecar = json.loads((directory / "corrosion_dataset.json").read_text())
    rows = []
    with open(directory / "corrosion_dataset.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["year"]), int(row["sensor"]), float(row["ln_y"])))
    n_years = max(r[0] for r in rows)
    n_sensors = max(r[1] for r in rows)
    log_meas = np.empty((n_years, n_sensors))
    for year, sensor, ln_y in rows:
        log_meas[year - 1, sensor - 1] = ln_y
    return CorrosionDataset(
        log_measurements=log_meas,
        truth_grid=np.asarray(sidecar["truth_grid"]),
        truth_ln_a=np.asarray(sidecar["truth_ln_a"]),
        truth_b=np.asarray(sidecar["truth_b"]),
        error=MeasurementError(sidecar["mu_log"], sidecar["sigma_log"]),
        seed=sidecar["seed"],
    )


def save_kalman_reference(posteriors, directory) -> None:
    """One JSON record per year: mean vector + packed lower-triangular cov."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for year, (mean, cov) in enumerate(posteriors, start=1):
        tril = cov[np.tril_indices(cov.shape[0])]
        records.append(
            {"year": year, "mean": mean.tolist(), "cov_lower_triangle": tril.tolist()}
        )
    (directory / "kalman_reference.json").write_text(json.dumps(records))
