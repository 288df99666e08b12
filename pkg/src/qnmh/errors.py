import math
from typing import Optional


class QNMHError(Exception):
    """Base class for all toolkit errors."""


class ParameterSpaceError(QNMHError):
    """A parameter vector was passed in the wrong coordinate space."""


class ModelSupportError(QNMHError, ValueError):
    """Parameters outside the model's support where a value cannot encode it."""


class CovarianceNotPositiveDefiniteError(QNMHError):
    """The SV joint noise covariance is not positive definite at some time step."""

    def __init__(self, t: int, x_t: float, sigma_v: float, rho: float):
        self.t = t
        self.x_t = x_t
        super().__init__(
            f"Joint noise covariance not positive definite at t={t}: "
            f"x_t={x_t:.6g}, sigma_v^2*exp(x_t)={sigma_v ** 2 * math.exp(x_t):.6g} <= rho^2={rho ** 2:.6g}"
        )


class ParticleCollapseError(QNMHError):
    """All particle weights are zero at some time step."""

    def __init__(self, t: Optional[int] = None):
        self.t = t
        where = f" at t={t}" if t is not None else ""
        super().__init__(f"Particle system collapsed{where}: all weights are zero.")


class InsufficientSamplesError(QNMHError):
    """Too few distinct samples to estimate a covariance matrix."""


class DataValidationError(QNMHError, ValueError):
    """Input data violates the dataset contract."""


class ConfigError(QNMHError, ValueError):
    """Experiment configuration is invalid."""
