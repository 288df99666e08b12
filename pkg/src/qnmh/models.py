"""State-space models, priors and the unconstrained reparametrization.

Two models ship: the scalar linear Gaussian state-space model (LGSS)

    x_{t+1} | x_t ~ N(mu + phi (x_t - mu), sigma_v^2),   y_t | x_t ~ N(x_t, 0.5^2)

and the stochastic volatility model with leverage, where (x_{t+1}, y_t) given x_t
is jointly Gaussian with mean (mu + phi (x_t - mu), 0) and covariance
[[sigma_v^2, rho], [rho, exp(x_t)]]. Both start from the stationary law of x_0.

The Markov chain runs on theta_bar = (mu, atanh(phi), log(sigma_v)[, atanh(rho)]).
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from data.models.ssm_models import (
    DataSet,
    ModelKind,
    ModelSpec,
    ParameterSpace,
    ParameterVector,
    PriorSpec,
)
from src.qnmh.errors import (
    CovarianceNotPositiveDefiniteError,
    ModelSupportError,
    ParameterSpaceError,
)
from src.qnmh.utils import make_rng

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


def require_space(theta: ParameterVector, space: ParameterSpace) -> np.ndarray:
    if theta.space != space:
        raise ParameterSpaceError(f"expected {space.value} coordinates, got {theta.space.value}")
    return theta.values


def _log_sech2(x):
    # log(1 - tanh(x)^2) without cancellation for large |x|
    a = np.abs(x)
    return 2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


# ============================================================
# Base model
# ============================================================

class StateSpaceModel(ABC):
    """
    Scalar-state model with a stationary AR(1)-type latent process.

    Subclasses provide the observation density, the transition sampler and the
    complete-data score terms that Fisher's identity needs.
    """

    kind: ModelKind
    # indices of parameters mapped through tanh (phi, rho) and exp (sigma_v)
    _tanh_index: Tuple[int, ...] = (1,)
    _exp_index: Tuple[int, ...] = (2,)

    def __init__(self, spec: Optional[ModelSpec] = None):
        self.spec = spec or ModelSpec(kind=self.kind)
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def parameter_names(self) -> List[str]:
        return self.spec.parameter_names

    @property
    def dim(self) -> int:
        return len(self.parameter_names)

    def default_prior(self) -> PriorSpec:
        return PriorSpec.default_for(self.kind)

    # ------------------------
    # Support and reparametrization
    # ------------------------

    def in_support(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim or not np.all(np.isfinite(theta)):
            return False
        return bool(np.all(np.abs(theta[list(self._tanh_index)]) < 1.0) and np.all(theta[list(self._exp_index)] > 0.0))

    def to_unconstrained(self, theta: ParameterVector) -> ParameterVector:
        values = np.array(require_space(theta, ParameterSpace.NATURAL), dtype=float)
        idx_t, idx_e = list(self._tanh_index), list(self._exp_index)
        values[idx_t] = np.arctanh(values[idx_t])
        values[idx_e] = np.log(values[idx_e])
        return ParameterVector.unconstrained(values)

    def to_natural(self, theta_bar: ParameterVector) -> ParameterVector:
        return ParameterVector.natural(self.natural_values(require_space(theta_bar, ParameterSpace.UNCONSTRAINED)))

    def natural_values(self, theta_bar: np.ndarray) -> np.ndarray:
        values = np.array(theta_bar, dtype=float)
        idx_t, idx_e = list(self._tanh_index), list(self._exp_index)
        values[idx_t] = np.tanh(values[idx_t])
        values[idx_e] = np.exp(values[idx_e])
        return values

    def natural_jacobian_diagonal(self, theta_bar: np.ndarray) -> np.ndarray:
        """d theta / d theta_bar; the transform acts coordinatewise."""
        theta_bar = np.asarray(theta_bar, dtype=float)
        diag = np.ones_like(theta_bar)
        idx_t, idx_e = list(self._tanh_index), list(self._exp_index)
        diag[idx_t] = 1.0 - np.tanh(theta_bar[idx_t]) ** 2
        diag[idx_e] = np.exp(theta_bar[idx_e])
        return diag

    def log_jacobian(self, theta_bar: np.ndarray) -> float:
        theta_bar = np.asarray(theta_bar, dtype=float)
        return float(np.sum(_log_sech2(theta_bar[list(self._tanh_index)])) + np.sum(theta_bar[list(self._exp_index)]))

    def grad_log_jacobian(self, theta_bar: np.ndarray) -> np.ndarray:
        theta_bar = np.asarray(theta_bar, dtype=float)
        grad = np.zeros_like(theta_bar)
        grad[list(self._tanh_index)] = -2.0 * np.tanh(theta_bar[list(self._tanh_index)])
        grad[list(self._exp_index)] = 1.0
        return grad

    # ------------------------
    # Latent dynamics
    # ------------------------

    @staticmethod
    def stationary_moments(theta: np.ndarray) -> Tuple[float, float]:
        mu, phi, sigma_v = theta[0], theta[1], theta[2]
        if abs(phi) >= 1.0:
            raise ModelSupportError(f"|phi| = {abs(phi)} >= 1: no stationary initial distribution")
        return float(mu), float(sigma_v ** 2 / (1.0 - phi ** 2))

    def sample_initial(self, theta: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        mean, var = self.stationary_moments(theta)
        return mean + math.sqrt(var) * rng.standard_normal(n)

    @abstractmethod
    def transition_moments(self, theta: np.ndarray, x: np.ndarray, y_prev: Optional[float]) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and variance of x_{t+1} given x_t (and y_t when it enters the dynamics)."""
        raise NotImplementedError

    def sample_transition(self, theta: np.ndarray, x: np.ndarray, y_prev: Optional[float], rng: np.random.Generator) -> np.ndarray:
        mean, var = self.transition_moments(theta, x, y_prev)
        return mean + np.sqrt(var) * rng.standard_normal(np.shape(x))

    def propagation_valid(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Mask of states from which the y-conditioned transition is well defined."""
        return np.ones(np.shape(x), dtype=bool)

    @abstractmethod
    def log_observation(self, theta: np.ndarray, y: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # ------------------------
    # Complete-data score terms (natural coordinates)
    # ------------------------

    def initial_score(self, theta: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """Gradient of log p(x_0) under the stationary law, one row per particle."""
        mu, phi, sigma_v = theta[0], theta[1], theta[2]
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        u = x0 - mu
        one_m_phi2 = 1.0 - phi ** 2
        out = np.zeros((x0.size, self.dim))
        out[:, 0] = u * one_m_phi2 / sigma_v ** 2
        out[:, 1] = -phi / one_m_phi2 + u ** 2 * phi / sigma_v ** 2
        out[:, 2] = -1.0 / sigma_v + u ** 2 * one_m_phi2 / sigma_v ** 3
        return out

    def _ar1_transition_score(self, theta: np.ndarray, x_prev: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        mu, phi, sigma_v = theta[0], theta[1], theta[2]
        x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
        x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
        u_prev = x_prev - mu
        resid = (x_next - mu) - phi * u_prev
        out = np.zeros((x_prev.size, self.dim))
        out[:, 0] = resid * (1.0 - phi) / sigma_v ** 2
        out[:, 1] = resid * u_prev / sigma_v ** 2
        out[:, 2] = -1.0 / sigma_v + resid ** 2 / sigma_v ** 3
        return out

    @abstractmethod
    def transition_score(self, theta: np.ndarray, x_prev: np.ndarray, x_next: np.ndarray, y_prev: Optional[float]) -> np.ndarray:
        raise NotImplementedError

    # ------------------------
    # Simulation
    # ------------------------

    @abstractmethod
    def simulate(self, theta: ParameterVector, T: int, seed: int) -> DataSet:
        raise NotImplementedError

    def _check_simulation_input(self, theta: ParameterVector, T: int) -> np.ndarray:
        values = require_space(theta, ParameterSpace.NATURAL)
        if values.size != self.dim:
            raise ModelSupportError(f"{self.kind.value} expects {self.dim} parameters, got {values.size}")
        if T < 1:
            raise ModelSupportError(f"T must be >= 1, got {T}")
        if not self.in_support(values):
            raise ModelSupportError(f"parameters {values.tolist()} outside the {self.kind.value} support")
        return values


# ============================================================
# LGSS
# ============================================================

class LinearGaussianModel(StateSpaceModel):
    kind = ModelKind.LGSS

    @property
    def observation_variance(self) -> float:
        return self.spec.observation_sd ** 2

    def transition_moments(self, theta, x, y_prev=None):
        mu, phi, sigma_v = theta[0], theta[1], theta[2]
        mean = mu + phi * (np.asarray(x, dtype=float) - mu)
        return mean, np.full(np.shape(mean), sigma_v ** 2)

    def log_observation(self, theta, y, x):
        r = self.observation_variance
        return -0.5 * (_LOG_2PI + math.log(r) + (y - np.asarray(x, dtype=float)) ** 2 / r)

    def transition_score(self, theta, x_prev, x_next, y_prev=None):
        return self._ar1_transition_score(theta, x_prev, x_next)

    def simulate(self, theta: ParameterVector, T: int, seed: int) -> DataSet:
        values = self._check_simulation_input(theta, T)
        mu, phi, sigma_v = values
        rng = make_rng(seed)
        x0_mean, x0_var = self.stationary_moments(values)
        x = np.empty(T + 1)
        x[0] = x0_mean + math.sqrt(x0_var) * rng.standard_normal()
        v = rng.standard_normal(T)
        e = rng.standard_normal(T)
        for t in range(1, T + 1):
            x[t] = mu + phi * (x[t - 1] - mu) + sigma_v * v[t - 1]
        y = x[1:] + self.spec.observation_sd * e
        return DataSet(observations=y, states=x)


# ============================================================
# SV with leverage
# ============================================================

def sv_transition_moments(theta: np.ndarray, x_t, y_t) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conditional mean and variance of x_{t+1} given (x_t, y_t), obtained by Gaussian
    conditioning on the joint law of (x_{t+1}, y_t) | x_t. rho is the raw covariance
    entry, so the variance is sigma_v^2 - rho^2 exp(-x_t) and may be non-positive.
    """
    mu, phi, sigma_v, rho = theta[0], theta[1], theta[2], theta[3]
    x_t = np.asarray(x_t, dtype=float)
    inv_obs_var = np.exp(-x_t)
    mean = mu + phi * (x_t - mu) + rho * inv_obs_var * y_t
    var = sigma_v ** 2 - rho ** 2 * inv_obs_var
    return mean, var


class StochasticVolatilityModel(StateSpaceModel):
    kind = ModelKind.SV_LEVERAGE
    _tanh_index = (1, 3)
    _exp_index = (2,)

    def transition_moments(self, theta, x, y_prev=None):
        if y_prev is None:
            # x_1 | x_0: no observation at t = 0, plain AR(1) step
            mu, phi, sigma_v = theta[0], theta[1], theta[2]
            mean = mu + phi * (np.asarray(x, dtype=float) - mu)
            return mean, np.full(np.shape(mean), sigma_v ** 2)
        return sv_transition_moments(theta, x, y_prev)

    def propagation_valid(self, theta, x):
        sigma_v, rho = theta[2], theta[3]
        return sigma_v ** 2 * np.exp(np.asarray(x, dtype=float)) > rho ** 2

    def log_observation(self, theta, y, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * (_LOG_2PI + x + y ** 2 * np.exp(-x))

    def transition_score(self, theta, x_prev, x_next, y_prev=None):
        if y_prev is None:
            return self._ar1_transition_score(theta, x_prev, x_next)
        mu, phi, sigma_v, rho = theta[0], theta[1], theta[2], theta[3]
        x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
        x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
        mean, var = sv_transition_moments(theta, x_prev, y_prev)
        resid = x_next - mean
        inv_obs_var = np.exp(-x_prev)
        # d/dvar log N(x; m, v) = (resid^2 / v - 1) / (2 v)
        dlog_dvar = (resid ** 2 / var - 1.0) / (2.0 * var)
        out = np.zeros((x_prev.size, self.dim))
        out[:, 0] = resid * (1.0 - phi) / var
        out[:, 1] = resid * (x_prev - mu) / var
        out[:, 2] = dlog_dvar * 2.0 * sigma_v
        out[:, 3] = resid * y_prev * inv_obs_var / var + dlog_dvar * (-2.0 * rho * inv_obs_var)
        return out

    def simulate(self, theta: ParameterVector, T: int, seed: int) -> DataSet:
        values = self._check_simulation_input(theta, T)
        sigma_v, rho = values[2], values[3]
        rng = make_rng(seed)
        x0_mean, x0_var = self.stationary_moments(values)
        x = np.empty(T + 1)
        y = np.empty(T)
        x[0] = x0_mean + math.sqrt(x0_var) * rng.standard_normal()
        mean, var = self.transition_moments(values, x[0], None)
        x[1] = mean + math.sqrt(var) * rng.standard_normal()
        for t in range(1, T + 1):
            if not self.propagation_valid(values, x[t]):
                raise CovarianceNotPositiveDefiniteError(t=t, x_t=float(x[t]), sigma_v=float(sigma_v), rho=float(rho))
            y[t - 1] = math.exp(0.5 * x[t]) * rng.standard_normal()
            if t < T:
                mean, var = sv_transition_moments(values, x[t], y[t - 1])
                x[t + 1] = mean + math.sqrt(var) * rng.standard_normal()
        return DataSet(observations=y, states=x)


# ============================================================
# Module-level API
# ============================================================

def build_model(kind: ModelKind) -> StateSpaceModel:
    kind = ModelKind(kind)
    return LinearGaussianModel() if kind == ModelKind.LGSS else StochasticVolatilityModel()


def model_for(theta: ParameterVector) -> StateSpaceModel:
    return build_model(ModelKind.LGSS if theta.dim == 3 else ModelKind.SV_LEVERAGE)


def simulate_lgss(theta: ParameterVector, T: int, seed: int) -> DataSet:
    return LinearGaussianModel().simulate(theta, T, seed)


def simulate_sv(theta: ParameterVector, T: int, seed: int) -> DataSet:
    return StochasticVolatilityModel().simulate(theta, T, seed)


def to_unconstrained(theta: ParameterVector) -> ParameterVector:
    return model_for(theta).to_unconstrained(theta)


def to_natural(theta_bar: ParameterVector) -> ParameterVector:
    return model_for(theta_bar).to_natural(theta_bar)


def log_jacobian(theta_bar: ParameterVector) -> float:
    values = require_space(theta_bar, ParameterSpace.UNCONSTRAINED)
    return model_for(theta_bar).log_jacobian(values)


def log_prior(theta: ParameterVector, prior: PriorSpec) -> float:
    """Sum of independent log prior densities; -inf outside the support."""
    values = require_space(theta, ParameterSpace.NATURAL)
    if values.size != prior.dim:
        raise ModelSupportError(f"prior has {prior.dim} components, theta has {values.size}")
    total = 0.0
    for value, component in zip(values, prior.components):
        lp = component.log_density(float(value))
        if lp == -math.inf or math.isnan(lp):
            return -math.inf
        total += lp
    return total


def grad_log_prior(theta: np.ndarray, prior: PriorSpec) -> np.ndarray:
    return np.array([c.grad_log_density(float(v)) for v, c in zip(theta, prior.components)])


class TargetEvaluation(BaseModel):
    """Log-target (posterior in unconstrained coordinates) and its gradient at one point"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    log_target: float
    log_likelihood: float
    gradient: Optional[np.ndarray] = None
    backend_failed: bool = False
    message: Optional[str] = None


class LikelihoodBackend(ABC):
    """Evaluates (or estimates) log p(y | theta) and its score for a bound model."""

    name: str = "backend"

    def __init__(self, model: StateSpaceModel):
        self.model = model
        self.logger = logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def log_likelihood(self, theta: np.ndarray, data: DataSet, rng: Optional[np.random.Generator] = None) -> float:
        raise NotImplementedError

    @abstractmethod
    def evaluate(
        self,
        theta_bar: np.ndarray,
        data: DataSet,
        prior: PriorSpec,
        rng: Optional[np.random.Generator] = None,
        need_gradient: bool = True,
    ) -> TargetEvaluation:
        raise NotImplementedError

    def _prior_terms(self, theta_bar: np.ndarray, prior: PriorSpec) -> Tuple[np.ndarray, float]:
        """Natural parameters and log prior + log Jacobian (-inf off the support)."""
        theta = self.model.natural_values(theta_bar)
        lp = log_prior(ParameterVector.natural(theta), prior)
        if lp == -math.inf:
            return theta, -math.inf
        return theta, lp + self.model.log_jacobian(theta_bar)

    def _unconstrained_gradient(self, theta_bar: np.ndarray, theta: np.ndarray, loglik_grad: np.ndarray, prior: PriorSpec) -> np.ndarray:
        natural_grad = loglik_grad + grad_log_prior(theta, prior)
        return natural_grad * self.model.natural_jacobian_diagonal(theta_bar) + self.model.grad_log_jacobian(theta_bar)


def log_target(
    theta_bar: ParameterVector,
    data: DataSet,
    likelihood_backend: LikelihoodBackend,
    prior: Optional[PriorSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """log p(y | theta) + log p(theta) + log |d theta / d theta_bar|, evaluated at theta_bar."""
    values = require_space(theta_bar, ParameterSpace.UNCONSTRAINED)
    model = likelihood_backend.model
    prior = prior or model.default_prior()
    theta = model.natural_values(values)
    lp = log_prior(ParameterVector.natural(theta), prior)
    if lp == -math.inf:
        return -math.inf
    return likelihood_backend.log_likelihood(theta, data, rng) + lp + model.log_jacobian(values)


class PriorOnlyBackend(LikelihoodBackend):
    """Zero log-likelihood; the chain then targets the prior."""

    name = "prior"

    def log_likelihood(self, theta, data, rng=None) -> float:
        return 0.0

    def evaluate(self, theta_bar, data, prior, rng=None, need_gradient=True) -> TargetEvaluation:
        theta_bar = np.asarray(theta_bar, dtype=float)
        theta, log_prior_jac = self._prior_terms(theta_bar, prior)
        if log_prior_jac == -math.inf:
            return TargetEvaluation(log_target=-math.inf, log_likelihood=0.0)
        gradient = None
        if need_gradient:
            gradient = self._unconstrained_gradient(theta_bar, theta, np.zeros(self.model.dim), prior)
        return TargetEvaluation(log_target=log_prior_jac, log_likelihood=0.0, gradient=gradient)
