"""Experiment orchestration behind the command line: datasets, pilot runs, the
(backend x proposal) benchmark grid and the stochastic volatility case study."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from data.input.dataset_input import dataset_frame, describe, ingest_bitcoin, read_dataset
from data.models.chain_models import ChainTrace, MetricsReport, ProposalConfig, ProposalKind, PosteriorSummary
from data.models.experiment_config import ExperimentConfig
from data.models.ssm_models import DataSet, ModelKind, ParameterVector
from data.service.replication_client import ReplicationJob, run_replications
from data.storage.artifact_store import ArtifactStore
from src.qnmh.diagnostics import (
    acf_frame,
    metrics_frame,
    metrics_markdown,
    posterior_summary,
    prior_curve_frame,
    summarize,
)
from src.qnmh.errors import ConfigError
from src.qnmh.kalman import KalmanBackend
from src.qnmh.models import LikelihoodBackend, PriorOnlyBackend, StateSpaceModel, build_model
from src.qnmh.sampler import pilot_preconditioner, run_chain
from src.qnmh.smc import ParticleBackend, run_particle_filter, smoothed_state_paths, systematic_resample
from src.qnmh.utils import make_rng, spawn_seeds

logger = logging.getLogger(__name__)

PATHS_PER_DRAW = 200
RW_SCALE = 2.38


# ============================================================
# Building blocks
# ============================================================

def build_backend(name: str, model: StateSpaceModel, config: ExperimentConfig) -> LikelihoodBackend:
    if name == "kalman":
        return KalmanBackend(model)
    if name == "particle":
        return ParticleBackend(model, n_particles=config.particles, lag=config.lag)
    if name == "prior":
        return PriorOnlyBackend(model)
    raise ConfigError(f"unknown backend {name!r}")


def simulate_dataset(config: ExperimentConfig) -> DataSet:
    model = build_model(config.model)
    return model.simulate(ParameterVector.natural(config.theta), config.T, config.seed)


def load_dataset(config: ExperimentConfig) -> DataSet:
    """The configured dataset file, or a dataset simulated from theta_true when none is set."""
    if config.data_path is not None:
        return read_dataset(config.data_path)
    logger.info("No data_path configured; simulating T=%d from theta=%s", config.T, config.theta)
    return simulate_dataset(config)


def dataset_target(config: ExperimentConfig, default_name: str) -> Path:
    return Path(config.data_path) if config.data_path is not None else Path(config.out_dir) / default_name


def write_dataset_artifact(data: DataSet, target: Path, config: ExperimentConfig, provenance: Dict) -> Path:
    store = ArtifactStore(target.parent, config.config_hash())
    return store.write_frame(target.name, dataset_frame(data), seed=config.seed, provenance=provenance)


def initial_theta(config: ExperimentConfig) -> Optional[ParameterVector]:
    return ParameterVector.natural(config.initial_theta) if config.initial_theta is not None else None


def pilot_run(config: ExperimentConfig, data: DataSet, backend_name: str, seed: int) -> np.ndarray:
    """
    pMH0 pilot chains whose latter-half covariance preconditions the pMH0/pMH1
    proposals. The first stage uses an identity covariance and ``pilot_step``; each
    further stage restarts from the end of the previous one with its covariance and
    the 2.38 / sqrt(p) random-walk scale.
    """
    model = build_model(config.model)
    backend = build_backend(backend_name, model, config)
    half = config.pilot_iterations // 2
    proposal = ProposalConfig.from_label("pmh0", step_size=config.pilot_step)
    theta0 = initial_theta(config)
    covariance = None
    for stage, stage_seed in enumerate(spawn_seeds(seed, config.pilot_stages), start=1):
        trace = run_chain(
            model, data, backend, proposal,
            K=config.pilot_iterations,
            seed=stage_seed,
            burn_in=half,
            theta0=theta0,
            record_timing=False,
        )
        covariance = pilot_preconditioner(trace, start=half, stop=config.pilot_iterations)
        logger.info(
            "Pilot stage %d (%s): acceptance %.3f, preconditioner diagonal %s",
            stage, backend_name, float(np.mean(trace.accepted[1:])), np.round(np.diag(covariance), 5).tolist(),
        )
        proposal = ProposalConfig.from_label(
            "pmh0", step_size=RW_SCALE / math.sqrt(model.dim), preconditioner=covariance,
        )
        theta0 = ParameterVector.natural(trace.natural[-1])
    return covariance


def run_replication(
    seed: int,
    config: ExperimentConfig,
    data: DataSet,
    label: str,
    backend_name: str,
    preconditioner: Optional[np.ndarray] = None,
) -> ChainTrace:
    """One chain of one grid cell; module level so that worker processes can unpickle it."""
    model = build_model(config.model)
    backend = build_backend(backend_name, model, config)
    extra = {}
    if ProposalConfig.from_label(label, step_size=1.0).kind != ProposalKind.QMH and preconditioner is not None:
        extra["preconditioner"] = preconditioner
    proposal = config.proposal_config(label, backend_name, **extra)
    return run_chain(
        model, data, backend, proposal,
        K=config.iterations,
        seed=seed,
        burn_in=config.burn_in,
        theta0=initial_theta(config),
        record_timing=config.record_timing,
    )


def _trace_name(backend: str, label: str, rep: Optional[int] = None) -> str:
    suffix = "" if rep is None else f"_rep{rep:02d}"
    return f"traces/{backend}_{label}{suffix}.csv"


def write_posterior(store: ArtifactStore, trace: ChainTrace, config: ExperimentConfig, prefix: str) -> PosteriorSummary:
    summary = posterior_summary(trace, config.burn_in, config.histogram_bins)
    for post in summary.parameters:
        store.write_frame(f"{prefix}hist_{post.name}.csv", summary.histogram_frame(post.name), seed=trace.seed)
    model = build_model(config.model)
    store.write_frame(f"{prefix}prior_curves.csv", prior_curve_frame(model.default_prior(), trace.parameter_names, summary), seed=trace.seed)
    store.write_frame(f"{prefix}acf.csv", acf_frame(trace, config.burn_in), seed=trace.seed)
    store.write_json(f"{prefix}posterior.json", summary, seed=trace.seed)
    return summary


# ============================================================
# Single chain
# ============================================================

class RunOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    trace: ChainTrace
    report: MetricsReport
    summary: PosteriorSummary


def run_single(config: ExperimentConfig, store: Optional[ArtifactStore] = None) -> RunOutcome:
    data = load_dataset(config)
    seeds = spawn_seeds(config.seed, 2)
    preconditioner = None
    if ProposalConfig.from_label(config.proposal, step_size=1.0).kind != ProposalKind.QMH:
        preconditioner = pilot_run(config, data, config.backend, seeds[0])
    trace = run_replication(seeds[1], config, data, config.proposal, config.backend, preconditioner)
    report = summarize([trace], config.burn_in, backend=config.backend)
    summary = posterior_summary(trace, config.burn_in, config.histogram_bins)
    if store is not None:
        store.write_frame(_trace_name(config.backend, config.proposal), trace.to_frame(config.record_timing), seed=trace.seed)
        store.write_json("metrics.json", report, seed=trace.seed)
        store.write_frame("metrics.csv", metrics_frame([report]), seed=trace.seed)
        summary = write_posterior(store, trace, config, prefix="")
    return RunOutcome(trace=trace, report=report, summary=summary)


# ============================================================
# Benchmark grid
# ============================================================

class CellFailure(BaseModel):
    backend: str
    proposal: str
    seed: int
    error_type: Optional[str] = None
    message: Optional[str] = None


class BenchmarkOutcome(BaseModel):
    reports: List[MetricsReport]
    failures: List[CellFailure]


def run_benchmark(config: ExperimentConfig, store: Optional[ArtifactStore] = None) -> BenchmarkOutcome:
    """
    Runs ``replications`` chains for every (backend, proposal) cell. pMH cells use a
    preconditioner from one pilot run per backend. Failed replications are recorded
    per cell; a cell without any successful replication gets no report row.
    """
    data = load_dataset(config)
    cells = [(b, p) for b in config.backends for p in config.proposals]
    seeds = spawn_seeds(config.seed, len(config.backends) + len(cells) * config.replications)
    pilot_seeds, chain_seeds = seeds[:len(config.backends)], seeds[len(config.backends):]

    needs_pilot = any(ProposalConfig.from_label(p, step_size=1.0).kind != ProposalKind.QMH for p in config.proposals)
    preconditioners: Dict[str, np.ndarray] = {}
    if needs_pilot:
        for backend_name, seed in zip(config.backends, pilot_seeds):
            preconditioners[backend_name] = pilot_run(config, data, backend_name, seed)

    jobs = []
    for c, (backend_name, label) in enumerate(cells):
        for r in range(config.replications):
            jobs.append(ReplicationJob(
                key=f"{backend_name}/{label}/{r}",
                func=run_replication,
                seed=chain_seeds[c * config.replications + r],
                kwargs=dict(
                    config=config,
                    data=data,
                    label=label,
                    backend_name=backend_name,
                    preconditioner=preconditioners.get(backend_name),
                ),
            ))
    logger.info("Benchmark: %d cells x %d replications on %d worker(s)", len(cells), config.replications, config.jobs)
    results = run_replications(jobs, config.jobs)

    reports: List[MetricsReport] = []
    failures: List[CellFailure] = []
    for c, (backend_name, label) in enumerate(cells):
        cell_results = results[c * config.replications:(c + 1) * config.replications]
        traces = []
        for r, result in enumerate(cell_results):
            if not result.ok:
                failures.append(CellFailure(backend=backend_name, proposal=label, seed=result.seed, error_type=result.error_type, message=result.error))
                continue
            traces.append(result.value)
            if store is not None:
                store.write_frame(_trace_name(backend_name, label, r), result.value.to_frame(config.record_timing), seed=result.seed)
        if traces:
            reports.append(summarize(traces, config.burn_in, backend=backend_name))
        else:
            logger.warning("Cell %s/%s has no successful replication", backend_name, label)

    if store is not None:
        store.write_frame("benchmark.csv", metrics_frame(reports), seed=config.seed)
        store.write_json("benchmark.json", {"reports": reports, "failures": failures}, seed=config.seed)
        store.write_text("benchmark.md", metrics_markdown(reports))
    return BenchmarkOutcome(reports=reports, failures=failures)


# ============================================================
# Stochastic volatility case study
# ============================================================

class StateEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_draws: int

    def to_frame(self, data: DataSet) -> pd.DataFrame:
        """Log-volatility estimate with 95% bands and the implied 95% log-return interval."""
        t = np.arange(1, data.T + 1)
        x = self.mean[1:]
        return pd.DataFrame({
            "t": t,
            "y": data.observations,
            "x_mean": x,
            "x_lower": self.lower[1:],
            "x_upper": self.upper[1:],
            "y_lower": -1.96 * np.exp(0.5 * x),
            "y_upper": 1.96 * np.exp(0.5 * x),
        })


def marginal_state_estimate(
    model: StateSpaceModel,
    draws: np.ndarray,
    data: DataSet,
    n_particles: int,
    seed: int,
    paths_per_draw: int = PATHS_PER_DRAW,
) -> StateEstimate:
    """
    Log-volatility smoothed over the parameter posterior: one particle filter per
    parameter draw (natural coordinates), genealogy paths at time T averaged with
    their weights. Bands are pooled 2.5% / 97.5% quantiles of paths resampled by weight.
    """
    if draws.shape[0] < 1:
        raise ValueError("no parameter draws to marginalize over")
    draw_seeds = spawn_seeds(seed, draws.shape[0])
    mean = np.zeros(data.T + 1)
    pooled = []
    for theta, draw_seed in zip(draws, draw_seeds):
        rng = make_rng(draw_seed)
        system = run_particle_filter(model, theta, data.observations, n_particles, rng)
        paths, weights = smoothed_state_paths(system)
        mean += weights @ paths
        idx = systematic_resample(weights, rng.uniform())
        keep = idx[np.linspace(0, idx.size - 1, min(paths_per_draw, idx.size)).astype(int)]
        pooled.append(paths[keep])
    pooled = np.vstack(pooled)
    lower, upper = np.quantile(pooled, [0.025, 0.975], axis=0)
    return StateEstimate(mean=mean / draws.shape[0], lower=lower, upper=upper, n_draws=int(draws.shape[0]))


class CaseStudyOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    trace: ChainTrace
    summary: PosteriorSummary
    states: StateEstimate
    data_provenance: Dict


def _case_study_data(config: ExperimentConfig) -> Tuple[DataSet, Dict]:
    if config.data_path is not None:
        return read_dataset(config.data_path), {"source": str(config.data_path)}
    if config.raw_prices_path is not None:
        return ingest_bitcoin(config.raw_prices_path, config.bitcoin_start, config.bitcoin_end)
    raise ConfigError("the SV case study needs data_path (ingested returns) or raw_prices_path")


def run_sv_casestudy(config: ExperimentConfig, store: Optional[ArtifactStore] = None) -> CaseStudyOutcome:
    if config.model != ModelKind.SV_LEVERAGE:
        raise ConfigError("the case study runs the sv model; set model = \"sv\"")
    data, provenance = _case_study_data(config)
    model = build_model(config.model)
    backend = build_backend(config.backend, model, config)
    chain_seed, state_seed = spawn_seeds(config.seed, 2)
    proposal = config.proposal_config(config.proposal, config.backend)
    trace = run_chain(
        model, data, backend, proposal,
        K=config.iterations,
        seed=chain_seed,
        burn_in=config.burn_in,
        theta0=initial_theta(config),
        record_timing=config.record_timing,
    )
    draws = trace.natural[config.burn_in::config.thinning]
    logger.info("Marginalizing the log-volatility over %d posterior draws", draws.shape[0])
    states = marginal_state_estimate(model, draws, data, config.particles, state_seed)
    summary = posterior_summary(trace, config.burn_in, config.histogram_bins)

    if store is not None:
        store.write_frame(_trace_name(config.backend, config.proposal), trace.to_frame(config.record_timing), seed=chain_seed, provenance=provenance)
        summary = write_posterior(store, trace, config, prefix="sv_")
        store.write_frame("sv_log_volatility.csv", states.to_frame(data), seed=state_seed, provenance={"draws": states.n_draws, "thinning": config.thinning})
        store.write_json("sv_metrics.json", summarize([trace], config.burn_in, backend=config.backend), seed=chain_seed)
    return CaseStudyOutcome(trace=trace, summary=summary, states=states, data_provenance=provenance)


def dataset_summary(data: DataSet) -> Dict[str, float]:
    stats = describe(data)
    if data.states is not None:
        stats["x_mean"] = float(np.mean(data.states))
    return {k: (v if math.isfinite(v) else None) for k, v in stats.items()}
