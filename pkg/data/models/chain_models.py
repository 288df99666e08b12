from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ProposalKind(str, Enum):
    PMH0 = "pmh0"
    PMH1 = "pmh1"
    QMH = "qmh"


class QuasiNewtonStrategy(str, Enum):
    """How curvature pairs that violate s'z > 0 are treated"""
    DAMPED = "dbfgs"
    IGNORE = "ibfgs"
    ENFORCE = "ebfgs"


class CorrectionMethod(str, Enum):
    NONE = "none"
    FLIP = "flip"
    REG = "reg"
    HYB = "hyb"


class PairConvention(str, Enum):
    """Orientation of the gradient difference in a curvature pair (s, z)"""
    NEGATED_GRADIENT = "negated-gradient"          # z = -(G_l - G_{l-1}), B tracks the negative Hessian
    GRADIENT_DIFFERENCE = "gradient-difference"    # z = G_l - G_{l-1}, as in the classical recursion


class H0Policy(str, Enum):
    """Initial curvature before the first update"""
    SCALED_IDENTITY = "delta"      # delta * I
    SECANT_SCALED = "secant"       # (z'z / s'z) * I from the first pair with s'z > 0


class CurvatureEstimate(BaseModel):
    """Approximate negative Hessian of the log-target with provenance flags"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrix: np.ndarray
    damped_used: bool = False
    corrected: CorrectionMethod = CorrectionMethod.NONE
    fallback_identity: bool = False
    jittered: bool = False
    min_eigenvalue: float
    n_pairs: int = 0
    n_skipped: int = 0


class ProposalConfig(BaseModel):
    """Proposal settings for one chain"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: ProposalKind
    step_size: float = Field(..., gt=0.0, description="epsilon; scales drift by eps^2/2 and covariance by eps^2")
    preconditioner: Optional[np.ndarray] = Field(None, description="P for pMH0/pMH1, identity when absent")
    strategy: Optional[QuasiNewtonStrategy] = None
    correction: CorrectionMethod = CorrectionMethod.NONE
    memory_length: int = Field(20, description="M, number of past states in the gradient memory")
    delta: float = Field(100.0, gt=0.0, description="fallback / initial curvature scale")
    h0_policy: H0Policy = H0Policy.SCALED_IDENTITY
    pair_convention: PairConvention = PairConvention.NEGATED_GRADIENT
    warmup_step: float = Field(0.01, gt=0.0, description="random-walk step for the first M qMH iterations")
    empirical_covariance: Optional[np.ndarray] = Field(None, description="Sigma_emp for the hybrid correction")

    @field_validator("preconditioner", "empirical_covariance", mode="before")
    @classmethod
    def _as_matrix(cls, v):
        if v is None:
            return None
        return np.atleast_2d(np.asarray(v, dtype=float))

    @model_validator(mode="after")
    def _check_consistency(self):
        for name in ("preconditioner", "empirical_covariance"):
            mat = getattr(self, name)
            if mat is None:
                continue
            if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.min(np.linalg.eigvalsh(mat)) <= 0.0:
                raise ValueError(f"{name} must be positive definite")
        if self.kind == ProposalKind.QMH:
            if self.strategy is None:
                raise ValueError("qMH proposals need a quasi-Newton strategy")
            if self.memory_length < 2:
                raise ValueError("qMH proposals need memory_length >= 2")
            if self.strategy == QuasiNewtonStrategy.DAMPED and self.correction != CorrectionMethod.NONE:
                raise ValueError("damped BFGS is positive definite by construction and takes no correction")
            if self.strategy != QuasiNewtonStrategy.DAMPED and self.correction == CorrectionMethod.NONE:
                raise ValueError(f"{self.strategy.value} needs a correction method (flip, reg or hyb)")
        return self

    @property
    def label(self) -> str:
        if self.kind != ProposalKind.QMH:
            return self.kind.value
        if self.correction == CorrectionMethod.NONE:
            return self.strategy.value
        return f"{self.strategy.value}-{self.correction.value}"

    @classmethod
    def from_label(cls, label: str, **kwargs) -> "ProposalConfig":
        """Build from labels such as 'pmh0', 'pmh1', 'dbfgs', 'ibfgs-flip', 'ebfgs-hyb'."""
        label = label.strip().lower()
        if label in (ProposalKind.PMH0.value, ProposalKind.PMH1.value):
            return cls(kind=ProposalKind(label), **kwargs)
        strategy, _, correction = label.partition("-")
        return cls(
            kind=ProposalKind.QMH,
            strategy=QuasiNewtonStrategy(strategy),
            correction=CorrectionMethod(correction or "none"),
            **kwargs,
        )


class ChainTrace(BaseModel):
    """
    Per-iteration record of one Metropolis-Hastings run. States are in
    unconstrained coordinates; ``natural`` holds their images for reporting.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    parameter_names: List[str]
    states: np.ndarray
    natural: np.ndarray
    log_target: np.ndarray
    gradients: np.ndarray
    candidates: np.ndarray
    accepted: np.ndarray
    corrected: np.ndarray
    fallback: np.ndarray
    backend_failed: np.ndarray
    proposal_kinds: List[str]
    time_us: np.ndarray
    burn_in: int = 0
    warmup: int = 0
    anchor_lag: int = Field(1, ge=1, description="lag between a proposal's anchor and its candidate; M for qMH")
    proposal_label: str = ""
    seed: int = 0

    @property
    def length(self) -> int:
        return int(self.states.shape[0])

    def to_frame(self, record_timing: bool = True) -> pd.DataFrame:
        """CSV layout k, theta_1..theta_p (natural), logpost, accepted, corrected, time_us"""
        frame = pd.DataFrame({"k": np.arange(self.length)})
        for j in range(self.natural.shape[1]):
            frame[f"theta_{j + 1}"] = self.natural[:, j]
        frame["logpost"] = self.log_target
        frame["accepted"] = self.accepted.astype(int)
        frame["corrected"] = self.corrected.astype(int)
        frame["time_us"] = self.time_us if record_timing else np.zeros(self.length, dtype=np.int64)
        return frame


class ParameterPosterior(BaseModel):
    name: str
    mean: float
    sd: float
    bin_edges: List[float]
    density: List[float]


class PosteriorSummary(BaseModel):
    burn_in: int
    parameters: List[ParameterPosterior]

    def histogram_frame(self, name: str) -> pd.DataFrame:
        post = next(p for p in self.parameters if p.name == name)
        edges = np.asarray(post.bin_edges)
        return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "density": post.density})


class MetricsReport(BaseModel):
    """Comparison metrics of one proposal, medians across replications"""
    label: str
    backend: str
    n_replications: int
    acceptance_rate: float = Field(..., ge=0.0, le=1.0)
    correction_fraction: Optional[float] = None
    inefficiency_factors: Dict[str, float]
    max_if_median: float
    max_if_iqr: float
    iteration_time_ms: float
    time_per_effective_sample_ms: float
    effective_sample_size: float

    def to_row(self) -> Dict[str, object]:
        return {
            "backend": self.backend,
            "proposal": self.label,
            "acc": self.acceptance_rate,
            "cor": self.correction_fraction,
            "max_if": self.max_if_median,
            "max_if_iqr": self.max_if_iqr,
            "iter_ms": self.iteration_time_ms,
            "samp_ms": self.time_per_effective_sample_ms,
            "ess": self.effective_sample_size,
            "replications": self.n_replications,
        }
