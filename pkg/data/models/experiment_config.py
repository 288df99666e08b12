import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import dotenv
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data.models.chain_models import H0Policy, PairConvention, ProposalConfig, ProposalKind, QuasiNewtonStrategy
from data.models.ssm_models import ModelKind
from src.qnmh.errors import ConfigError
from src.qnmh.utils import stable_hash

logger = logging.getLogger(__name__)

BackendName = Literal["kalman", "particle", "prior"]

DEFAULT_THETA = {
    ModelKind.LGSS: [0.2, 0.5, 1.0],
    ModelKind.SV_LEVERAGE: [0.0, 0.9, 0.2, -0.05],
}
DEFAULT_PARTICLES = {ModelKind.LGSS: 1000, ModelKind.SV_LEVERAGE: 1500}
FULL_GRID = [
    "pmh0", "pmh1", "dbfgs",
    "ibfgs-flip", "ibfgs-reg", "ibfgs-hyb",
    "ebfgs-flip", "ebfgs-reg", "ebfgs-hyb",
]

# environment variable -> config field
ENV_OVERRIDES = {
    "QNMH_OUT_DIR": "out_dir",
    "QNMH_JOBS": "jobs",
    "QNMH_LOG_LEVEL": "log_level",
}


class ExperimentConfig(BaseModel):
    """One experiment: model, data, likelihood backend(s), proposal(s) and run lengths."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # model and data
    model: ModelKind = Field(ModelKind.LGSS, description="lgss or sv")
    theta_true: Optional[List[float]] = Field(None, description="Natural parameters used by simulate")
    initial_theta: Optional[List[float]] = Field(None, description="Chain start in natural coordinates")
    T: int = Field(500, ge=1, description="Number of simulated observations")
    data_path: Optional[Path] = Field(None, description="Dataset CSV (t,y[,x])")
    raw_prices_path: Optional[Path] = Field(None, description="Price CSV (date,close) for ingest-bitcoin")
    bitcoin_start: Optional[date] = None
    bitcoin_end: Optional[date] = None

    # likelihood backends
    backend: BackendName = "kalman"
    backends: List[BackendName] = Field(default_factory=lambda: ["kalman"], description="Benchmark grid rows")
    n_particles: Optional[int] = Field(None, ge=2, description="N; 1000 for LGSS, 1500 for SV when unset")
    lag: int = Field(10, ge=1)

    # proposals
    proposal: str = "dbfgs"
    proposals: List[str] = Field(default_factory=lambda: list(FULL_GRID), description="Benchmark grid columns")
    step_pmh0_kalman: float = Field(1.37, gt=0.0)
    step_pmh1_kalman: float = Field(0.57, gt=0.0)
    step_pmh0_particle: float = Field(1.48, gt=0.0)
    step_pmh1_particle: float = Field(0.47, gt=0.0)
    step_qmh: float = Field(0.5, gt=0.0)
    memory_length: int = Field(20, ge=2)
    warmup_step: float = Field(0.01, gt=0.0)
    delta: float = Field(100.0, gt=0.0)
    h0_policy: H0Policy = H0Policy.SCALED_IDENTITY
    undamped_pairs: PairConvention = Field(
        PairConvention.NEGATED_GRADIENT,
        description="Curvature-pair orientation for the ibfgs and ebfgs proposals; dbfgs always uses negated gradients",
    )

    # run lengths
    iterations: int = Field(10_000, ge=2, description="K")
    burn_in: int = Field(3_000, ge=0)
    replications: int = Field(25, ge=1)
    pilot_iterations: int = Field(2_000, ge=10)
    pilot_step: float = Field(0.1, gt=0.0)
    pilot_stages: int = Field(2, ge=1, description="Pilot chains run in sequence, each rescaled by the previous covariance")
    thinning: int = Field(50, ge=1, description="Every n-th post-burn-in draw for state marginalization")
    histogram_bins: int = Field(50, ge=1)

    # execution
    seed: int = Field(0, ge=0, lt=2 ** 64)
    jobs: int = Field(1, ge=1)
    out_dir: Path = Path("results")
    record_timing: bool = True
    log_level: str = "INFO"

    @model_validator(mode="before")
    @classmethod
    def _model_defaults(cls, values: Any) -> Any:
        # the sv model has no exact likelihood, default to the particle backend
        if isinstance(values, dict) and str(getattr(values.get("model"), "value", values.get("model"))).lower() == ModelKind.SV_LEVERAGE.value:
            values = dict(values)
            values.setdefault("backend", "particle")
            values.setdefault("backends", ["particle"])
        return values

    @model_validator(mode="after")
    def _check_consistency(self):
        dim = 3 if self.model == ModelKind.LGSS else 4
        for name in ("theta_true", "initial_theta"):
            values = getattr(self, name)
            if values is not None and len(values) != dim:
                raise ValueError(f"{name} needs {dim} values for the {self.model.value} model, got {len(values)}")
        if self.model != ModelKind.LGSS and ("kalman" == self.backend or "kalman" in self.backends):
            raise ValueError("the kalman backend is only available for the lgss model")
        if self.burn_in >= self.iterations:
            raise ValueError(f"burn_in ({self.burn_in}) must be below iterations ({self.iterations})")
        if self.bitcoin_start and self.bitcoin_end and self.bitcoin_start >= self.bitcoin_end:
            raise ValueError("bitcoin_start must precede bitcoin_end")
        for label in [self.proposal, *self.proposals]:
            try:
                ProposalConfig.from_label(label, step_size=1.0)
            except ValidationError as exc:
                raise ValueError(f"invalid proposal label {label!r}: {exc.errors()[0]['msg']}") from None
        return self

    # ------------------------
    # Derived settings
    # ------------------------

    @property
    def theta(self) -> List[float]:
        return self.theta_true if self.theta_true is not None else DEFAULT_THETA[self.model]

    @property
    def particles(self) -> int:
        return self.n_particles if self.n_particles is not None else DEFAULT_PARTICLES[self.model]

    def step_size(self, label: str, backend: Optional[str] = None) -> float:
        backend = backend or self.backend
        kind = ProposalConfig.from_label(label, step_size=1.0).kind
        if kind == ProposalKind.QMH:
            return self.step_qmh
        exact = backend != "particle"
        if kind == ProposalKind.PMH0:
            return self.step_pmh0_kalman if exact else self.step_pmh0_particle
        return self.step_pmh1_kalman if exact else self.step_pmh1_particle

    def proposal_config(self, label: str, backend: Optional[str] = None, **extra) -> ProposalConfig:
        strategy = ProposalConfig.from_label(label, step_size=1.0).strategy
        if strategy is not None and strategy != QuasiNewtonStrategy.DAMPED:
            extra.setdefault("pair_convention", self.undamped_pairs)
        return ProposalConfig.from_label(
            label,
            step_size=self.step_size(label, backend),
            memory_length=self.memory_length,
            delta=self.delta,
            h0_policy=self.h0_policy,
            warmup_step=self.warmup_step,
            **extra,
        )

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json"))


def environment_overrides() -> Dict[str, str]:
    """QNMH_* variables from the process environment or a .env file."""
    if dotenv.find_dotenv(usecwd=True):
        load_dotenv(dotenv.find_dotenv(usecwd=True))
    return {field: os.getenv(var) for var, field in ENV_OVERRIDES.items() if os.getenv(var)}


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    File values, then environment overrides, then explicit ``overrides``
    (command-line flags); later sources win. None-valued overrides are ignored.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with path.open("rb") as fh:
                values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values.update(environment_overrides())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = ExperimentConfig(**values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    logger.debug("Loaded config %s (hash %s)", path, config.config_hash()[:12])
    return config
