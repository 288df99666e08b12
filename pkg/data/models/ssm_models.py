import math
from enum import Enum
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats


class ParameterSpace(str, Enum):
    """Coordinate system a parameter vector lives in"""
    NATURAL = "natural"
    UNCONSTRAINED = "unconstrained"


class ModelKind(str, Enum):
    LGSS = "lgss"
    SV_LEVERAGE = "sv"


class ParameterVector(BaseModel):
    """Model parameters tagged with the coordinate space they are expressed in"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="Parameter values, (mu, phi, sigma_v[, rho]) or their unconstrained images")
    space: ParameterSpace = Field(ParameterSpace.NATURAL, description="Coordinate space of the values")

    @field_validator("values", mode="before")
    @classmethod
    def _as_float_array(cls, v):
        arr = np.array(v, dtype=float).reshape(-1)
        arr.setflags(write=False)
        return arr

    @classmethod
    def natural(cls, values) -> "ParameterVector":
        return cls(values=values, space=ParameterSpace.NATURAL)

    @classmethod
    def unconstrained(cls, values) -> "ParameterVector":
        return cls(values=values, space=ParameterSpace.UNCONSTRAINED)

    @property
    def dim(self) -> int:
        return int(self.values.size)


# ---------------------------
# Priors
# ---------------------------

class GaussianPrior(BaseModel):
    family: Literal["gaussian"] = "gaussian"
    mean: float
    sd: float = Field(..., gt=0.0)

    def log_density(self, x: float) -> float:
        return float(stats.norm.logpdf(x, loc=self.mean, scale=self.sd))

    def grad_log_density(self, x: float) -> float:
        return -(x - self.mean) / self.sd ** 2


class TruncatedGaussianPrior(BaseModel):
    """Gaussian restricted to (lower, upper) and renormalized by its mass there"""
    family: Literal["truncated_gaussian"] = "truncated_gaussian"
    mean: float
    sd: float = Field(..., gt=0.0)
    lower: float
    upper: float

    @model_validator(mode="after")
    def _check_bounds(self):
        if not self.lower < self.upper:
            raise ValueError(f"lower ({self.lower}) must be below upper ({self.upper})")
        return self

    def log_density(self, x: float) -> float:
        if not self.lower < x < self.upper:
            return -math.inf
        a = (self.lower - self.mean) / self.sd
        b = (self.upper - self.mean) / self.sd
        return float(stats.truncnorm.logpdf(x, a, b, loc=self.mean, scale=self.sd))

    def grad_log_density(self, x: float) -> float:
        return -(x - self.mean) / self.sd ** 2


class GammaPrior(BaseModel):
    """Gamma in shape-rate form, mean shape/rate"""
    family: Literal["gamma"] = "gamma"
    shape: float = Field(..., gt=0.0)
    rate: float = Field(..., gt=0.0)

    def log_density(self, x: float) -> float:
        if x <= 0.0:
            return -math.inf
        return float(stats.gamma.logpdf(x, self.shape, scale=1.0 / self.rate))

    def grad_log_density(self, x: float) -> float:
        return (self.shape - 1.0) / x - self.rate


PriorDistribution = Annotated[
    Union[GaussianPrior, TruncatedGaussianPrior, GammaPrior],
    Field(discriminator="family"),
]


class PriorSpec(BaseModel):
    """Independent per-parameter priors, in parameter order"""
    components: List[PriorDistribution]

    @property
    def dim(self) -> int:
        return len(self.components)

    @classmethod
    def lgss_default(cls) -> "PriorSpec":
        return cls(components=[
            GaussianPrior(mean=0.0, sd=1.0),
            TruncatedGaussianPrior(mean=0.5, sd=1.0, lower=-1.0, upper=1.0),
            GammaPrior(shape=2.0, rate=2.0),
        ])

    @classmethod
    def sv_default(cls) -> "PriorSpec":
        return cls(components=[
            GaussianPrior(mean=0.0, sd=1.0),
            TruncatedGaussianPrior(mean=0.95, sd=0.05, lower=-1.0, upper=1.0),
            GammaPrior(shape=2.0, rate=10.0),
            TruncatedGaussianPrior(mean=0.0, sd=1.0, lower=-1.0, upper=1.0),
        ])

    @classmethod
    def default_for(cls, kind: ModelKind) -> "PriorSpec":
        return cls.lgss_default() if kind == ModelKind.LGSS else cls.sv_default()


# ---------------------------
# Data and model description
# ---------------------------

class DataSet(BaseModel):
    """Observations y_1..y_T and, for synthetic data, the latent states x_0..x_T"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    observations: np.ndarray
    states: Optional[np.ndarray] = None

    @field_validator("observations", "states", mode="before")
    @classmethod
    def _as_float_array(cls, v):
        if v is None:
            return None
        return np.asarray(v, dtype=float).reshape(-1)

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.observations.size < 1:
            raise ValueError("a data set needs at least one observation (T >= 1)")
        if self.states is not None and self.states.size != self.observations.size + 1:
            raise ValueError(
                f"states must have length T+1={self.observations.size + 1}, got {self.states.size}"
            )
        return self

    @property
    def T(self) -> int:
        return int(self.observations.size)


class ModelSpec(BaseModel):
    kind: ModelKind
    observation_sd: float = Field(0.5, description="LGSS observation noise standard deviation")

    @model_validator(mode="after")
    def _fixed_observation_noise(self):
        if self.kind == ModelKind.LGSS and not math.isclose(self.observation_sd ** 2, 0.25):
            raise ValueError("the LGSS observation variance is fixed at 0.25")
        return self

    @property
    def parameter_names(self) -> List[str]:
        names = ["mu", "phi", "sigma_v"]
        return names + ["rho"] if self.kind == ModelKind.SV_LEVERAGE else names
