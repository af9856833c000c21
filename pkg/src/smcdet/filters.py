"""On-line and off-line particle filters for static parameter estimation.

Five algorithms over an abstract deterioration model:

* ``pf_run``     -- bootstrap filter with multinomial resampling
* ``pfgm_run``   -- resampling replaced by Gaussian-mixture rejuvenation
* ``tpfgm_run``  -- PFGM with adaptive tempering of each new likelihood
* ``ibis_run``   -- resample + independent-MH move against the full history
* ``tibis_run``  -- IBIS with tempering of the newest measurement
* ``smc_run``    -- off-line tempered sampler targeting one posterior

Mixture fits and MH moves happen in standard-normal (u) space, where the
prior density is the standard normal and the transform Jacobians cancel in
the acceptance ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp

from .ensembles import (
    DegenerateWeightsError,
    WeightedEnsemble,
    ess,
    normalize_log_weights,
    resample_multinomial,
    uniform_log_weights,
)
from .gmm import GaussianMixture, GMMFitError, fit_em
from .metrics import weighted_quantile_values
from .priors import PriorModel, log_prior_density_u

__all__ = [
    "DegeneracyError",
    "FilterConfig",
    "FilterReport",
    "StepRecord",
    "ibis_run",
    "imh_gm_move",
    "pf_run",
    "pfgm_run",
    "run_filter",
    "smc_run",
    "solve_temper_increment",
    "tibis_run",
    "tpfgm_run",
]

# |tempered ESS - N_T| tolerance of the bisection, relative to N_par
_TEMPER_TOL = 1e-8

_MAX_RUNGS = 200


class DegeneracyError(RuntimeError):
    """Every particle lost all weight at a given step."""

    def __init__(self, step: int):
        super().__init__(f"total weight degeneracy at step {step}")
        self.step = step


@dataclass(frozen=True)
class FilterConfig:
    """Run-time knobs shared by all filters."""

    n_particles: int
    resample_fraction: float = 0.5
    n_gm: int = 8
    burn_in: int = 0
    tempering: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 0.0 < self.resample_fraction <= 1.0:
            raise ValueError("resample_fraction must lie in (0, 1]")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if not 1.0 <= self.resample_fraction * self.n_particles <= self.n_particles:
            raise ValueError("resample threshold outside [1, n_particles]")

    @property
    def threshold(self) -> float:
        return self.resample_fraction * self.n_particles


@dataclass
class StepRecord:
    step: int
    mean: np.ndarray
    std: np.ndarray
    corr: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    ess: float
    resample_events: int
    q_ladder: list
    rung_ess: list
    acceptance_rates: list
    gmm_fallbacks: int
    evaluations: int


@dataclass
class FilterReport:
    algorithm: str
    config: FilterConfig
    steps: list
    final: WeightedEnsemble
    total_evaluations: int
    n_resample_events: int
    em_gaps: list = field(default_factory=list)
    acceptance_rates: list = field(default_factory=list)

    def posterior_mean_trace(self) -> np.ndarray:
        return np.array([rec.mean for rec in self.steps])

    def q_ladders(self) -> list:
        return [(rec.step, rec.q_ladder, rec.rung_ess) for rec in self.steps]

    def to_dict(self) -> dict:
        def fmt(x):
            return np.format_float_scientific(float(x), precision=8)

        return {
            "algorithm": self.algorithm,
            "config": asdict(self.config),
            "total_evaluations": self.total_evaluations,
            "n_resample_events": self.n_resample_events,
            "acceptance_rates": [fmt(r) for r in self.acceptance_rates],
            "steps": [
                {
                    "step": rec.step,
                    "mean": [fmt(v) for v in rec.mean],
                    "std": [fmt(v) for v in rec.std],
                    "q05": [fmt(v) for v in rec.q05],
                    "q95": [fmt(v) for v in rec.q95],
                    "ess": fmt(rec.ess),
                    "resample_events": rec.resample_events,
                    "q_ladder": [fmt(q) for q in rec.q_ladder],
                    "evaluations": rec.evaluations,
                }
                for rec in self.steps
            ],
        }


def _tempered_ess(log_weights, log_liks, power: float) -> float:
    """ESS of weights proportional to w_a * L^power, in log space."""
    with np.errstate(invalid="ignore"):
        lw = log_weights + power * log_liks
    lw = np.where(np.isnan(lw), -np.inf, lw)
    if not np.any(lw > -np.inf):
        return 0.0
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def solve_temper_increment(log_liks, log_weights_aux, q: float, n_threshold: float) -> float:
    """Bisect for the dq in (0, 1-q] at which the tempered ESS hits N_T.

    Precondition (caller's branch): ESS at dq -> 0+ exceeds N_T and ESS at
    dq = 1-q falls below it; violating the bracket is a caller bug.
    """
    ll = np.asarray(log_liks, dtype=float)
    lwa = np.asarray(log_weights_aux, dtype=float)
    n_par = ll.size
    hi = 1.0 - q
    if hi <= 0.0:
        raise ValueError("q already at 1; nothing to solve")
    ess_lo = _tempered_ess(lwa, ll, 0.0)
    ess_hi = _tempered_ess(lwa, ll, hi)
    if not (ess_hi < n_threshold < ess_lo):
        raise ValueError(
            f"bracket violation: ESS(0+)={ess_lo:.6g}, ESS({hi:.3g})={ess_hi:.6g}, "
            f"N_T={n_threshold:.6g}"
        )
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = _tempered_ess(lwa, ll, mid)
        if abs(val - n_threshold) <= _TEMPER_TOL * n_par or hi - lo < 1e-15:
            return mid
        if val > n_threshold:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _reweight(log_weights, log_liks, power: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        lw = log_weights + power * log_liks
    return normalize_log_weights(np.where(np.isnan(lw), -np.inf, lw))


def _summaries(particles, log_weights):
    ens = WeightedEnsemble(particles, log_weights)
    q05 = weighted_quantile_values(particles, log_weights, 0.05)
    q95 = weighted_quantile_values(particles, log_weights, 0.95)
    return ens.mean(), ens.std(), ens.corr(), q05, q95


def _record(step, particles, lw, ess_val, resamples, ladder, rung_ess, rates,
            fallbacks, evaluations) -> StepRecord:
    mean, std, corr, q05, q95 = _summaries(particles, lw)
    return StepRecord(
        step=step, mean=mean, std=std, corr=corr, q05=q05, q95=q95,
        ess=ess_val, resample_events=resamples, q_ladder=list(ladder),
        rung_ess=list(rung_ess), acceptance_rates=list(rates),
        gmm_fallbacks=fallbacks, evaluations=evaluations,
    )


def _em_gap(mixture: GaussianMixture) -> float:
    trace = mixture.em_log_likelihood_trace
    if len(trace) < 2:
        return np.inf
    return float(np.min(np.diff(trace)))


def _fit_mixture(u, log_weights, config: FilterConfig, rng, em_gaps: list) -> GaussianMixture:
    n, d = u.shape
    k = max(1, min(config.n_gm, n // (d + 1)))
    gm = fit_em(u, log_weights, k, rng)
    em_gaps.append(_em_gap(gm))
    return gm


def _imh_move_u(u, caches: dict, combine, evaluate, gmm: GaussianMixture,
                n_burn: int, rng) -> tuple:
    """Independent MH sweeps in u-space with a mixture proposal.

    ``caches`` holds per-particle pieces of the target log-likelihood;
    ``combine`` maps them to the model part of the log-target; ``evaluate``
    computes fresh pieces for candidate points (and counts model calls).
    Returns (moved u, moved caches, acceptance rate).
    """
    u = np.array(u, dtype=float)
    caches = {k: np.array(v, dtype=float) for k, v in caches.items()}
    n = u.shape[0]
    target = combine(caches) + log_prior_density_u(u)
    g_current = np.asarray(gmm.log_density(u))
    n_accepted = 0
    n_proposed = 0
    for _ in range(n_burn + 1):
        cand = gmm.sample(n, rng)
        cand_caches = evaluate(cand)
        cand_target = combine(cand_caches) + log_prior_density_u(cand)
        g_cand = np.asarray(gmm.log_density(cand))
        with np.errstate(invalid="ignore"):
            log_alpha = (cand_target + g_current) - (target + g_cand)
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        accept = np.log(rng.random(n)) < log_alpha
        u[accept] = cand[accept]
        target[accept] = cand_target[accept]
        g_current[accept] = g_cand[accept]
        for key in caches:
            caches[key][accept] = cand_caches[key][accept]
        n_accepted += int(accept.sum())
        n_proposed += n
    return u, caches, n_accepted / n_proposed


def imh_gm_move(ensemble: WeightedEnsemble, target_log_lik, prior: PriorModel,
                gmm: GaussianMixture, n_burn: int, rng):
    """Move a resampled (uniform-weight) ensemble with the IMH-GM kernel.

    ``target_log_lik(theta_matrix)`` returns the model log-likelihood per
    row; the prior factor is the standard normal in u-space. Returns the
    moved ensemble (cached log-likelihoods updated) and the mean
    acceptance rate over all proposals.
    """
    u = prior.to_u(ensemble.particles)
    if ensemble.log_likelihoods is not None:
        cached = ensemble.log_likelihoods
    else:
        cached = np.asarray(target_log_lik(ensemble.particles), dtype=float)
    moved_u, caches, rate = _imh_move_u(
        u,
        {"ll": cached},
        lambda c: c["ll"],
        lambda cand: {"ll": np.asarray(target_log_lik(prior.from_u(cand)), dtype=float)},
        gmm,
        n_burn,
        rng,
    )
    moved = WeightedEnsemble(
        particles=prior.from_u(moved_u),
        log_weights=uniform_log_weights(ensemble.n_particles),
        log_likelihoods=caches["ll"],
    )
    return moved, rate


def _check_step_degeneracy(lw, ll, step):
    with np.errstate(invalid="ignore"):
        combined = lw + ll
    if not np.any(np.isfinite(combined)):
        raise DegeneracyError(step)


def _init(model, config):
    rng = np.random.default_rng(config.seed)
    model.reset_counter()
    particles = model.prior.sample(config.n_particles, rng)
    lw = uniform_log_weights(config.n_particles)
    return rng, particles, lw


def pf_run(model, data, config: FilterConfig) -> FilterReport:
    """Bootstrap particle filter: reweight, multinomial resample on low ESS."""
    rng, particles, lw = _init(model, config)
    n_t = config.threshold
    records = [_record(0, particles, lw, config.n_particles, 0, [], [], [], 0,
                       model.evaluations)]
    total_resamples = 0
    for k in range(1, model.n_steps(data) + 1):
        ll = model.step_log_lik(particles, k, data)
        _check_step_degeneracy(lw, ll, k)
        lw = _reweight(lw, ll, 1.0)
        e = ess(lw)
        resamples = 0
        if e < n_t:
            ens = resample_multinomial(WeightedEnsemble(particles, lw), rng)
            particles, lw = ens.particles, ens.log_weights
            resamples = 1
            total_resamples += 1
        records.append(_record(k, particles, lw, e, resamples, [1.0], [e], [], 0,
                               model.evaluations))
    return FilterReport(
        algorithm="pf", config=config, steps=records,
        final=WeightedEnsemble(particles, lw),
        total_evaluations=model.evaluations, n_resample_events=total_resamples,
    )


def pfgm_run(model, data, config: FilterConfig) -> FilterReport:
    """PF with mixture resampling: fresh particles drawn from a weighted
    EM fit in u-space instead of multinomial replication."""
    rng, particles, lw = _init(model, config)
    prior = model.prior
    n_t = config.threshold
    em_gaps: list = []
    records = [_record(0, particles, lw, config.n_particles, 0, [], [], [], 0,
                       model.evaluations)]
    total_resamples = 0
    for k in range(1, model.n_steps(data) + 1):
        ll = model.step_log_lik(particles, k, data)
        _check_step_degeneracy(lw, ll, k)
        lw = _reweight(lw, ll, 1.0)
        e = ess(lw)
        resamples = 0
        fallbacks = 0
        if e < n_t:
            try:
                gm = _fit_mixture(prior.to_u(particles), lw, config, rng, em_gaps)
                particles = prior.from_u(gm.sample(config.n_particles, rng))
            except GMMFitError:
                ens = resample_multinomial(WeightedEnsemble(particles, lw), rng)
                particles = ens.particles
                fallbacks = 1
            lw = uniform_log_weights(config.n_particles)
            resamples = 1
            total_resamples += 1
        records.append(_record(k, particles, lw, e, resamples, [1.0], [e], [],
                               fallbacks, model.evaluations))
    return FilterReport(
        algorithm="pfgm", config=config, steps=records,
        final=WeightedEnsemble(particles, lw),
        total_evaluations=model.evaluations, n_resample_events=total_resamples,
        em_gaps=em_gaps,
    )


def tpfgm_run(model, data, config: FilterConfig) -> FilterReport:
    """PFGM with adaptive tempering of each new measurement's likelihood."""
    rng, particles, lw = _init(model, config)
    prior = model.prior
    n_par = config.n_particles
    n_t = config.threshold
    em_gaps: list = []
    records = [_record(0, particles, lw, n_par, 0, [], [], [], 0, model.evaluations)]
    total_resamples = 0
    for k in range(1, model.n_steps(data) + 1):
        ll = model.step_log_lik(particles, k, data)
        _check_step_degeneracy(lw, ll, k)
        ess_first = _tempered_ess(lw, ll, 1.0)
        lwa = lw
        q = 0.0
        ladder: list = []
        rung_ess: list = []
        resamples = 0
        fallbacks = 0
        for _ in range(_MAX_RUNGS):
            if q >= 1.0:
                break
            ess_rem = _tempered_ess(lwa, ll, 1.0 - q)
            if ess_rem > n_t:
                lwa = _reweight(lwa, ll, 1.0 - q)
                q = 1.0
                ladder.append(1.0)
                rung_ess.append(ess_rem)
                continue
            if ess(lwa) > n_t:
                dq = solve_temper_increment(ll, lwa, q, n_t)
                q = min(q + dq, 1.0)
                lwa = _reweight(lwa, ll, dq)
                ladder.append(q)
                rung_ess.append(ess(lwa))
            # else: carried weights already at the threshold; rejuvenate
            # without advancing q
            try:
                gm = _fit_mixture(prior.to_u(particles), lwa, config, rng, em_gaps)
                particles = prior.from_u(gm.sample(n_par, rng))
            except GMMFitError:
                ens = resample_multinomial(WeightedEnsemble(particles, lwa), rng)
                particles = ens.particles
                fallbacks += 1
            lwa = uniform_log_weights(n_par)
            resamples += 1
            total_resamples += 1
            if q < 1.0:
                ll = model.step_log_lik(particles, k, data)
        else:
            raise DegeneracyError(k)
        lw = lwa
        records.append(_record(k, particles, lw, ess_first, resamples, ladder,
                               rung_ess, [], fallbacks, model.evaluations))
    return FilterReport(
        algorithm="tpfgm", config=config, steps=records,
        final=WeightedEnsemble(particles, lw),
        total_evaluations=model.evaluations, n_resample_events=total_resamples,
        em_gaps=em_gaps,
    )


def ibis_run(model, data, config: FilterConfig) -> FilterReport:
    """Iterated batch importance sampling with IMH-GM move steps."""
    rng, particles, lw = _init(model, config)
    prior = model.prior
    n_par = config.n_particles
    n_t = config.threshold
    cum = np.zeros(n_par)
    em_gaps: list = []
    all_rates: list = []
    records = [_record(0, particles, lw, n_par, 0, [], [], [], 0, model.evaluations)]
    total_resamples = 0
    for k in range(1, model.n_steps(data) + 1):
        ll = model.step_log_lik(particles, k, data)
        _check_step_degeneracy(lw, ll, k)
        cum = cum + ll
        lw = _reweight(lw, ll, 1.0)
        e = ess(lw)
        resamples = 0
        rates: list = []
        fallbacks = 0
        if e < n_t:
            try:
                gm = _fit_mixture(prior.to_u(particles), lw, config, rng, em_gaps)
            except GMMFitError:
                gm = None
                fallbacks = 1
            ens = resample_multinomial(
                WeightedEnsemble(particles, lw, log_likelihoods=cum), rng
            )
            particles, cum = ens.particles, ens.log_likelihoods
            if gm is not None:
                u = prior.to_u(particles)
                moved_u, caches, rate = _imh_move_u(
                    u,
                    {"hist": cum},
                    lambda c: c["hist"],
                    lambda cand: {
                        "hist": model.history_log_lik(prior.from_u(cand), data, k)
                    },
                    gm,
                    config.burn_in,
                    rng,
                )
                particles = prior.from_u(moved_u)
                cum = caches["hist"]
                rates.append(rate)
                all_rates.append(rate)
            lw = uniform_log_weights(n_par)
            resamples = 1
            total_resamples += 1
        records.append(_record(k, particles, lw, e, resamples, [1.0], [e], rates,
                               fallbacks, model.evaluations))
    return FilterReport(
        algorithm="ibis", config=config, steps=records,
        final=WeightedEnsemble(particles, lw, log_likelihoods=cum),
        total_evaluations=model.evaluations, n_resample_events=total_resamples,
        em_gaps=em_gaps, acceptance_rates=all_rates,
    )


def tibis_run(model, data, config: FilterConfig) -> FilterReport:
    """IBIS with tempering of the newest measurement's likelihood.

    On degeneracy within step n the intermediate targets are
    L(y_{1:n-1}|theta) * L^q(y_n|theta) * prior, with a GMM fit, a
    multinomial resample and an IMH-GM move at every tempering rung.
    """
    rng, particles, lw = _init(model, config)
    prior = model.prior
    n_par = config.n_particles
    n_t = config.threshold
    cum = np.zeros(n_par)
    em_gaps: list = []
    all_rates: list = []
    records = [_record(0, particles, lw, n_par, 0, [], [], [], 0, model.evaluations)]
    total_resamples = 0
    for k in range(1, model.n_steps(data) + 1):
        ll = model.step_log_lik(particles, k, data)
        _check_step_degeneracy(lw, ll, k)
        ess_first = _tempered_ess(lw, ll, 1.0)
        lwa = lw
        q = 0.0
        ladder: list = []
        rung_ess: list = []
        resamples = 0
        fallbacks = 0
        rates: list = []
        for _ in range(_MAX_RUNGS):
            if q >= 1.0:
                break
            ess_rem = _tempered_ess(lwa, ll, 1.0 - q)
            if ess_rem > n_t:
                lwa = _reweight(lwa, ll, 1.0 - q)
                q = 1.0
                ladder.append(1.0)
                rung_ess.append(ess_rem)
                continue
            if ess(lwa) > n_t:
                dq = solve_temper_increment(ll, lwa, q, n_t)
                q = min(q + dq, 1.0)
                lwa = _reweight(lwa, ll, dq)
                ladder.append(q)
                rung_ess.append(ess(lwa))
            try:
                gm = _fit_mixture(prior.to_u(particles), lwa, config, rng, em_gaps)
            except GMMFitError:
                gm = None
                fallbacks += 1
            # both caches (history and current-step likelihood) must follow
            # the same multinomial draw
            idx = rng.choice(n_par, size=n_par, replace=True, p=np.exp(lwa))
            particles, cum, ll = particles[idx], cum[idx], ll[idx]
            if gm is not None:
                q_now = q
                u = prior.to_u(particles)
                moved_u, caches, rate = _imh_move_u(
                    u,
                    {"prev": cum, "step": ll},
                    lambda c: _combine_tempered(c, q_now),
                    lambda cand: _evaluate_tempered(model, prior, cand, data, k),
                    gm,
                    config.burn_in,
                    rng,
                )
                particles = prior.from_u(moved_u)
                cum = caches["prev"]
                ll = caches["step"]
                rates.append(rate)
                all_rates.append(rate)
            lwa = uniform_log_weights(n_par)
            resamples += 1
            total_resamples += 1
        else:
            raise DegeneracyError(k)
        cum = cum + ll
        lw = lwa
        records.append(_record(k, particles, lw, ess_first, resamples, ladder,
                               rung_ess, rates, fallbacks, model.evaluations))
    return FilterReport(
        algorithm="tibis", config=config, steps=records,
        final=WeightedEnsemble(particles, lw, log_likelihoods=cum),
        total_evaluations=model.evaluations, n_resample_events=total_resamples,
        em_gaps=em_gaps, acceptance_rates=all_rates,
    )


def _combine_tempered(caches: dict, q: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        out = caches["prev"] + q * caches["step"]
    return np.where(np.isnan(out), -np.inf, out)


def _evaluate_tempered(model, prior, cand_u, data, k: int) -> dict:
    theta = prior.from_u(cand_u)
    prev = model.history_log_lik(theta, data, k - 1)
    step = model.step_log_lik(theta, k, data)
    return {"prev": prev, "step": step}


def smc_run(model, data, config: FilterConfig, n_steps: int | None = None) -> FilterReport:
    """Off-line tempered sampler for the single posterior after n_steps.

    Builds the adaptive q-ladder on the full-batch likelihood, with a GMM
    fit, multinomial resample and IMH-GM move at every rung.
    """
    rng, particles, lw = _init(model, config)
    prior = model.prior
    n_par = config.n_particles
    n_t = config.threshold
    k_final = model.n_steps(data) if n_steps is None else n_steps
    full = model.history_log_lik(particles, data, k_final)
    if not np.any(np.isfinite(full)):
        raise DegeneracyError(k_final)
    q = 0.0
    ladder: list = []
    rung_ess: list = []
    em_gaps: list = []
    rates: list = []
    fallbacks = 0
    uniform = uniform_log_weights(n_par)
    for _ in range(_MAX_RUNGS):
        if q >= 1.0:
            break
        ess_rem = _tempered_ess(uniform, full, 1.0 - q)
        if ess_rem >= n_t:
            dq = 1.0 - q
        else:
            dq = solve_temper_increment(full, uniform, q, n_t)
        q = min(q + dq, 1.0)
        lw = _reweight(uniform, full, dq)
        ladder.append(q)
        rung_ess.append(ess(lw))
        try:
            gm = _fit_mixture(prior.to_u(particles), lw, config, rng, em_gaps)
        except GMMFitError:
            gm = None
            fallbacks += 1
        ens = resample_multinomial(
            WeightedEnsemble(particles, lw, log_likelihoods=full), rng
        )
        particles, full = ens.particles, ens.log_likelihoods
        if gm is not None:
            q_now = q
            moved_u, caches, rate = _imh_move_u(
                prior.to_u(particles),
                {"full": full},
                lambda c: _scale_full(c, q_now),
                lambda cand: {
                    "full": model.history_log_lik(prior.from_u(cand), data, k_final)
                },
                gm,
                config.burn_in,
                rng,
            )
            particles = prior.from_u(moved_u)
            full = caches["full"]
            rates.append(rate)
    else:
        raise DegeneracyError(k_final)
    lw = uniform_log_weights(n_par)
    record = _record(k_final, particles, lw, rung_ess[-1] if rung_ess else n_par,
                     len(ladder), ladder, rung_ess, rates, fallbacks,
                     model.evaluations)
    return FilterReport(
        algorithm="smc", config=config, steps=[record],
        final=WeightedEnsemble(particles, lw, log_likelihoods=full),
        total_evaluations=model.evaluations, n_resample_events=len(ladder),
        em_gaps=em_gaps, acceptance_rates=rates,
    )


def _scale_full(caches: dict, q: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        out = q * caches["full"]
    return np.where(np.isnan(out), -np.inf, out)


_RUNNERS = {
    "pf": pf_run,
    "pfgm": pfgm_run,
    "tpfgm": tpfgm_run,
    "ibis": ibis_run,
    "tibis": tibis_run,
    "smc": smc_run,
}


def run_filter(name: str, model, data, config: FilterConfig, **kwargs) -> FilterReport:
    try:
        runner = _RUNNERS[name]
    except KeyError:
        raise ValueError(f"unknown filter '{name}'") from None
    return runner(model, data, config, **kwargs)
