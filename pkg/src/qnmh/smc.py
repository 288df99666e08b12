"""Bootstrap particle filter and fixed-lag particle smoother.

The filter propagates from the transition density, weights by the observation
density and resamples systematically at every step. Ancestor indices are kept
for every step so that the genealogy can be traced back for smoothing.
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp

from data.models.ssm_models import DataSet, ParameterSpace, ParameterVector, PriorSpec
from src.qnmh.errors import DataValidationError, ModelSupportError, ParticleCollapseError
from src.qnmh.models import (
    LikelihoodBackend,
    StateSpaceModel,
    TargetEvaluation,
    model_for,
    require_space,
)
from src.qnmh.utils import make_rng

logger = logging.getLogger(__name__)


class ParticleSystem(BaseModel):
    """
    Particles at t = 0..T (rows), normalized weights per row and ancestor indices:
    particles[t, i] was propagated from particles[t-1, ancestors[t, i]].
    Indices are zero-based. Row 0 holds the uniform-weighted initial draws.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    particles: np.ndarray
    weights: np.ndarray
    ancestors: np.ndarray
    log_likelihood_increments: np.ndarray
    log_likelihood: float

    @property
    def n_particles(self) -> int:
        return int(self.particles.shape[1])

    @property
    def T(self) -> int:
        return int(self.particles.shape[0] - 1)


class SmoothedStatistics(BaseModel):
    """Smoothed complete-data score (natural coordinates) accumulated over time"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    score: np.ndarray
    per_step: np.ndarray
    lag: int


# ---------------------------
# Resampling
# ---------------------------

def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """
    Systematic resampling with a single uniform ``u`` in [0, 1): index i is drawn
    either floor(N w_i) or ceil(N w_i) times.
    """
    weights = np.asarray(weights, dtype=float)
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    if np.any(weights < 0.0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    total = weights.sum()
    if total <= 0.0:
        raise ParticleCollapseError()
    n = weights.size
    cumulative = np.cumsum(weights / total)
    cumulative[-1] = 1.0
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


# ---------------------------
# Filter
# ---------------------------

def run_particle_filter(
    model: StateSpaceModel,
    theta: np.ndarray,
    y: np.ndarray,
    n_particles: int,
    rng: np.random.Generator,
) -> ParticleSystem:
    if n_particles < 2:
        raise ValueError(f"at least two particles are needed, got {n_particles}")
    if not model.in_support(theta):
        raise ModelSupportError(f"parameters {np.asarray(theta).tolist()} outside the {model.kind.value} support")
    if not np.all(np.isfinite(y)):
        raise DataValidationError("observations must be finite")

    T, N = y.size, n_particles
    particles = np.empty((T + 1, N))
    weights = np.empty((T + 1, N))
    ancestors = np.empty((T + 1, N), dtype=np.int64)
    increments = np.empty(T)
    log_n = math.log(N)

    particles[0] = model.sample_initial(theta, N, rng)
    weights[0] = 1.0 / N
    ancestors[0] = np.arange(N)

    for t in range(1, T + 1):
        if t == 1:
            ancestors[t] = np.arange(N)
        else:
            ancestors[t] = systematic_resample(weights[t - 1], rng.uniform())
        y_prev = None if t == 1 else y[t - 2]
        x = model.sample_transition(theta, particles[t - 1, ancestors[t]], y_prev, rng)
        log_w = model.log_observation(theta, y[t - 1], x)
        if t < T:
            # particles whose y-conditioned transition is undefined cannot be propagated
            valid = model.propagation_valid(theta, x)
            if not np.all(valid):
                logger.debug("t=%d: %d particles without a valid transition", t, int(np.sum(~valid)))
                log_w = np.where(valid, log_w, -np.inf)
        log_w = np.where(np.isnan(log_w), -np.inf, log_w)
        max_log_w = np.max(log_w)
        if not np.isfinite(max_log_w):
            raise ParticleCollapseError(t)
        w = np.exp(log_w - max_log_w)
        sum_w = w.sum()
        increments[t - 1] = max_log_w + math.log(sum_w) - log_n
        particles[t] = x
        weights[t] = w / sum_w

    return ParticleSystem(
        particles=particles,
        weights=weights,
        ancestors=ancestors,
        log_likelihood_increments=increments,
        log_likelihood=float(np.sum(increments)),
    )


def bootstrap_pf(
    theta: ParameterVector,
    data: DataSet,
    N: int,
    seed: int,
    model: Optional[StateSpaceModel] = None,
) -> ParticleSystem:
    """Bootstrap particle filter; deterministic given the seed."""
    values = require_space(theta, ParameterSpace.NATURAL)
    model = model or model_for(theta)
    return run_particle_filter(model, values, data.observations, N, make_rng(seed))


# ---------------------------
# Smoothing
# ---------------------------

def _trace_back(ancestors: np.ndarray, idx: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Map particle indices at time ``start`` to their ancestors at time ``stop``."""
    for s in range(start, stop, -1):
        idx = ancestors[s, idx]
    return idx


def fixed_lag_statistics(model: StateSpaceModel, theta: np.ndarray, system: ParticleSystem, y: np.ndarray, lag: int) -> SmoothedStatistics:
    """
    Fixed-lag smoothing of the complete-data score. The term involving x_t is
    averaged over the ancestral lines of the weighted particles at min(t + lag, T);
    for t > T - lag that is the time-T genealogy.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    T, N = system.T, system.n_particles
    per_step = np.zeros((T + 1, model.dim))
    all_idx = np.arange(N)

    kappa = min(lag, T)
    idx0 = _trace_back(system.ancestors, all_idx, kappa, 0)
    per_step[0] = system.weights[kappa] @ model.initial_score(theta, system.particles[0, idx0])

    for t in range(1, T + 1):
        kappa = min(t + lag, T)
        idx = _trace_back(system.ancestors, all_idx, kappa, t)
        x_t = system.particles[t, idx]
        x_prev = system.particles[t - 1, system.ancestors[t, idx]]
        y_prev = None if t == 1 else y[t - 2]
        per_step[t] = system.weights[kappa] @ model.transition_score(theta, x_prev, x_t, y_prev)

    return SmoothedStatistics(score=per_step.sum(axis=0), per_step=per_step, lag=lag)


def smoothed_state_paths(system: ParticleSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Ancestral trajectories of the time-T particles, shape (N, T+1), with their weights."""
    T, N = system.T, system.n_particles
    paths = np.empty((N, T + 1))
    idx = np.arange(N)
    paths[:, T] = system.particles[T, idx]
    for s in range(T, 0, -1):
        idx = system.ancestors[s, idx]
        paths[:, s - 1] = system.particles[s - 1, idx]
    return paths, system.weights[T].copy()


def genealogy_statistics(model: StateSpaceModel, theta: np.ndarray, system: ParticleSystem, y: np.ndarray) -> np.ndarray:
    """Path-space smoothing of the complete-data score using the time-T genealogy."""
    paths, w = smoothed_state_paths(system)
    score = w @ model.initial_score(theta, paths[:, 0])
    for t in range(1, system.T + 1):
        y_prev = None if t == 1 else y[t - 2]
        score = score + w @ model.transition_score(theta, paths[:, t - 1], paths[:, t], y_prev)
    return score


def _unconstrained_score(model, theta_bar, loglik_grad, prior) -> np.ndarray:
    backend = ParticleBackend(model)
    return backend._unconstrained_gradient(theta_bar, model.natural_values(theta_bar), loglik_grad, prior)


def fixed_lag_score(
    theta_bar: ParameterVector,
    data: DataSet,
    N: int,
    lag: int,
    seed: int,
    prior: Optional[PriorSpec] = None,
    model: Optional[StateSpaceModel] = None,
) -> np.ndarray:
    """Fixed-lag particle estimate of the log-target gradient in unconstrained coordinates."""
    values = require_space(theta_bar, ParameterSpace.UNCONSTRAINED)
    model = model or model_for(theta_bar)
    prior = prior or model.default_prior()
    theta = model.natural_values(values)
    system = run_particle_filter(model, theta, data.observations, N, make_rng(seed))
    stats = fixed_lag_statistics(model, theta, system, data.observations, lag)
    return _unconstrained_score(model, values, stats.score, prior)


def genealogy_score(
    theta_bar: ParameterVector,
    data: DataSet,
    N: int,
    seed: int,
    prior: Optional[PriorSpec] = None,
    model: Optional[StateSpaceModel] = None,
) -> np.ndarray:
    values = require_space(theta_bar, ParameterSpace.UNCONSTRAINED)
    model = model or model_for(theta_bar)
    prior = prior or model.default_prior()
    theta = model.natural_values(values)
    system = run_particle_filter(model, theta, data.observations, N, make_rng(seed))
    return _unconstrained_score(model, values, genealogy_statistics(model, theta, system, data.observations), prior)


class ParticleBackend(LikelihoodBackend):
    """Bootstrap-PF likelihood estimate and fixed-lag smoothed score from one filter run."""

    name = "particle"

    def __init__(self, model: StateSpaceModel, n_particles: int = 1000, lag: int = 10):
        super().__init__(model)
        self.n_particles = n_particles
        self.lag = lag

    def _rng(self, rng: Optional[np.random.Generator]) -> np.random.Generator:
        return rng if rng is not None else make_rng(0)

    def log_likelihood(self, theta, data, rng=None) -> float:
        system = run_particle_filter(self.model, np.asarray(theta, dtype=float), data.observations, self.n_particles, self._rng(rng))
        return system.log_likelihood

    def evaluate(self, theta_bar, data, prior, rng=None, need_gradient=True) -> TargetEvaluation:
        theta_bar = np.asarray(theta_bar, dtype=float)
        theta, log_prior_jac = self._prior_terms(theta_bar, prior)
        if log_prior_jac == -math.inf:
            return TargetEvaluation(log_target=-math.inf, log_likelihood=-math.inf)
        system = run_particle_filter(self.model, theta, data.observations, self.n_particles, self._rng(rng))
        gradient = None
        if need_gradient:
            stats = fixed_lag_statistics(self.model, theta, system, data.observations, self.lag)
            gradient = self._unconstrained_gradient(theta_bar, theta, stats.score, prior)
        return TargetEvaluation(
            log_target=system.log_likelihood + log_prior_jac,
            log_likelihood=system.log_likelihood,
            gradient=gradient,
        )


def log_mean_exp(log_values: np.ndarray) -> float:
    log_values = np.asarray(log_values, dtype=float)
    return float(logsumexp(log_values) - math.log(log_values.size))
