"""Exact log-likelihood and score for the scalar LGSS model.

Kalman filter, Rauch-Tung-Striebel smoother and Fisher's identity: the score equals
the smoothed expectation of the complete-data score, which for the LGSS model only
needs smoothed means, variances and lag-one cross-covariances.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from data.models.ssm_models import DataSet, ParameterSpace, ParameterVector, PriorSpec
from src.qnmh.errors import DataValidationError, ModelSupportError
from src.qnmh.models import (
    LikelihoodBackend,
    LinearGaussianModel,
    StateSpaceModel,
    TargetEvaluation,
    require_space,
)

_LOG_2PI = math.log(2.0 * math.pi)


class FilterResult(BaseModel):
    """
    Kalman filter output. Index 0 holds the stationary prior of x_0, so the
    predicted and filtered arrays have length T+1 and per-step terms length T.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    predicted_mean: np.ndarray
    predicted_var: np.ndarray
    filtered_mean: np.ndarray
    filtered_var: np.ndarray
    log_likelihood_terms: np.ndarray
    log_likelihood: float


class SmootherResult(BaseModel):
    """Smoothed marginals of x_0..x_T; cross_cov[t] = Cov(x_t, x_{t-1} | y_{1:T}), cross_cov[0] = 0."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    smoothed_mean: np.ndarray
    smoothed_var: np.ndarray
    cross_cov: np.ndarray


def _check_theta(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.size != 3:
        raise ModelSupportError(f"the Kalman backend handles the 3-parameter LGSS model, got {theta.size} parameters")
    if not LinearGaussianModel().in_support(theta):
        raise ModelSupportError(f"parameters {theta.tolist()} outside the LGSS support")
    return theta


def _check_observations(data: DataSet) -> np.ndarray:
    y = data.observations
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0]) + 1
        raise DataValidationError(f"non-finite observation at t={bad}")
    return y


def filter_values(theta: np.ndarray, y: np.ndarray, observation_variance: float = 0.25) -> FilterResult:
    mu, phi, sigma_v = _check_theta(theta)
    T = y.size
    q = sigma_v ** 2
    m_pred = np.empty(T + 1)
    p_pred = np.empty(T + 1)
    m_filt = np.empty(T + 1)
    p_filt = np.empty(T + 1)
    terms = np.empty(T)

    m_pred[0] = m_filt[0] = mu
    p_pred[0] = p_filt[0] = q / (1.0 - phi ** 2)
    for t in range(1, T + 1):
        m_pred[t] = mu + phi * (m_filt[t - 1] - mu)
        p_pred[t] = phi ** 2 * p_filt[t - 1] + q
        s = p_pred[t] + observation_variance
        innov = y[t - 1] - m_pred[t]
        terms[t - 1] = -0.5 * (_LOG_2PI + math.log(s) + innov ** 2 / s)
        gain = p_pred[t] / s
        m_filt[t] = m_pred[t] + gain * innov
        p_filt[t] = (1.0 - gain) * p_pred[t]

    return FilterResult(
        predicted_mean=m_pred,
        predicted_var=p_pred,
        filtered_mean=m_filt,
        filtered_var=p_filt,
        log_likelihood_terms=terms,
        log_likelihood=float(np.sum(terms)),
    )


def kalman_filter(theta: ParameterVector, data: DataSet) -> FilterResult:
    """Scalar Kalman recursion for the LGSS model started at the stationary law."""
    values = require_space(theta, ParameterSpace.NATURAL)
    return filter_values(values, _check_observations(data))


def rts_smoother(filter: FilterResult, theta: ParameterVector) -> SmootherResult:
    """Backward RTS pass; also returns the lag-one cross-covariances."""
    phi = float(np.asarray(theta.values if isinstance(theta, ParameterVector) else theta)[1])
    m_f, p_f = filter.filtered_mean, filter.filtered_var
    m_p, p_p = filter.predicted_mean, filter.predicted_var
    n = m_f.size
    m_s = m_f.copy()
    p_s = p_f.copy()
    cross = np.zeros(n)
    for t in range(n - 2, -1, -1):
        gain = p_f[t] * phi / p_p[t + 1]
        m_s[t] = m_f[t] + gain * (m_s[t + 1] - m_p[t + 1])
        p_s[t] = p_f[t] + gain ** 2 * (p_s[t + 1] - p_p[t + 1])
        cross[t + 1] = gain * p_s[t + 1]
    return SmootherResult(smoothed_mean=m_s, smoothed_var=p_s, cross_cov=cross)


def loglik_gradient(theta: np.ndarray, smoothed: SmootherResult) -> np.ndarray:
    """
    Fisher's identity for the LGSS model in natural coordinates (mu, phi, sigma_v):
    expectations of the stationary-initial and transition score terms under the
    smoothing distribution. The observation density does not depend on theta.
    """
    mu, phi, sigma_v = theta
    m, p, c = smoothed.smoothed_mean, smoothed.smoothed_var, smoothed.cross_cov
    u = m - mu
    eu2 = p + u ** 2                      # E[(x_t - mu)^2]
    eu_lag = c[1:] + u[1:] * u[:-1]       # E[(x_t - mu)(x_{t-1} - mu)]
    e_resid = u[1:] - phi * u[:-1]
    e_resid_lag = eu_lag - phi * eu2[:-1]
    e_resid2 = eu2[1:] - 2.0 * phi * eu_lag + phi ** 2 * eu2[:-1]
    T = u.size - 1
    s2 = sigma_v ** 2
    one_m_phi2 = 1.0 - phi ** 2

    d_mu = u[0] * one_m_phi2 / s2 + (1.0 - phi) * np.sum(e_resid) / s2
    d_phi = -phi / one_m_phi2 + eu2[0] * phi / s2 + np.sum(e_resid_lag) / s2
    d_sigma = -1.0 / sigma_v + eu2[0] * one_m_phi2 / sigma_v ** 3 - T / sigma_v + np.sum(e_resid2) / sigma_v ** 3
    return np.array([d_mu, d_phi, d_sigma])


def score_kalman(theta_bar: ParameterVector, data: DataSet, prior: Optional[PriorSpec] = None) -> np.ndarray:
    """Exact gradient of the log-target in unconstrained coordinates."""
    values = require_space(theta_bar, ParameterSpace.UNCONSTRAINED)
    backend = KalmanBackend()
    evaluation = backend.evaluate(values, data, prior or PriorSpec.lgss_default())
    return evaluation.gradient


class KalmanBackend(LikelihoodBackend):
    """Exact likelihood and score for the LGSS model."""

    name = "kalman"

    def __init__(self, model: Optional[StateSpaceModel] = None):
        model = model or LinearGaussianModel()
        if not isinstance(model, LinearGaussianModel):
            raise ModelSupportError("the Kalman backend is only available for the LGSS model")
        super().__init__(model)

    def log_likelihood(self, theta, data, rng=None) -> float:
        return filter_values(theta, _check_observations(data), self.model.observation_variance).log_likelihood

    def evaluate(self, theta_bar, data, prior, rng=None, need_gradient=True) -> TargetEvaluation:
        theta_bar = np.asarray(theta_bar, dtype=float)
        theta, log_prior_jac = self._prior_terms(theta_bar, prior)
        if log_prior_jac == -math.inf:
            return TargetEvaluation(log_target=-math.inf, log_likelihood=-math.inf)
        filtered = filter_values(theta, _check_observations(data), self.model.observation_variance)
        gradient = None
        if need_gradient:
            smoothed = rts_smoother(filtered, theta)
            gradient = self._unconstrained_gradient(theta_bar, theta, loglik_gradient(theta, smoothed), prior)
        return TargetEvaluation(
            log_target=filtered.log_likelihood + log_prior_jac,
            log_likelihood=filtered.log_likelihood,
            gradient=gradient,
        )
