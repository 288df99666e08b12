import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from data.input.dataset_input import write_dataset
from data.models.chain_models import PairConvention, ProposalConfig, ProposalKind
from data.models.experiment_config import ExperimentConfig, load_config
from data.models.ssm_models import ParameterVector
from data.service.replication_client import ReplicationJob, run_replications
from data.storage.artifact_store import ArtifactStore
from src.qnmh.errors import ConfigError
from src.qnmh.experiments import (
    marginal_state_estimate,
    pilot_run,
    run_benchmark,
    run_single,
    run_sv_casestudy,
)
from src.qnmh.models import PriorOnlyBackend, StochasticVolatilityModel, simulate_lgss, simulate_sv
from src.qnmh.sampler import run_chain
from src.qnmh.utils import spawn_seeds


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for var in ("QNMH_OUT_DIR", "QNMH_JOBS", "QNMH_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)


def small_config(tmp_path, **overrides):
    values = dict(
        T=60,
        iterations=300,
        burn_in=100,
        replications=2,
        pilot_iterations=100,
        memory_length=5,
        delta=10.0,
        histogram_bins=10,
        record_timing=False,
        out_dir=tmp_path / "out",
        seed=7,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def square(seed, offset=0):
    if seed % 2:
        raise RuntimeError(f"odd seed {seed}")
    return seed ** 2 + offset


# ---------------------------
# Configuration
# ---------------------------

def test_config_rejects_unknown_keys_and_kalman_for_sv():
    with pytest.raises(ValueError):
        ExperimentConfig(iteratons=100)
    with pytest.raises(ValueError):
        ExperimentConfig(model="sv", backend="kalman")
    with pytest.raises(ValueError):
        ExperimentConfig(iterations=100, burn_in=100)
    with pytest.raises(ValueError):
        ExperimentConfig(proposals=["lbfgs"])
    with pytest.raises(ValueError):
        ExperimentConfig(theta_true=[0.2, 0.5])


def test_sv_defaults_to_particle_backend():
    config = ExperimentConfig(model="sv")
    assert config.backend == "particle" and config.backends == ["particle"]
    assert config.theta == [0.0, 0.9, 0.2, -0.05]
    assert config.particles == 1500


def test_step_sizes_follow_backend_and_proposal():
    config = ExperimentConfig()
    assert config.step_size("pmh0", "kalman") == 1.37
    assert config.step_size("pmh1", "particle") == 0.47
    assert config.step_size("ibfgs-reg") == 0.5
    proposal = config.proposal_config("ebfgs-hyb", "kalman")
    assert proposal.kind == ProposalKind.QMH and proposal.label == "ebfgs-hyb"
    assert proposal.memory_length == 20 and proposal.delta == 100.0


def test_undamped_pair_convention_skips_damped_proposals():
    config = ExperimentConfig(undamped_pairs="gradient-difference")
    assert config.proposal_config("ibfgs-flip").pair_convention == PairConvention.GRADIENT_DIFFERENCE
    assert config.proposal_config("ebfgs-hyb").pair_convention == PairConvention.GRADIENT_DIFFERENCE
    assert config.proposal_config("dbfgs").pair_convention == PairConvention.NEGATED_GRADIENT
    assert ExperimentConfig().proposal_config("ibfgs-reg").pair_convention == PairConvention.NEGATED_GRADIENT


CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def test_particle_config_grid_uses_hybrid_correction():
    config = load_config(CONFIG_DIR / "lgss_particle.toml")
    assert config.proposals == ["pmh0", "pmh1", "dbfgs", "ibfgs-hyb"]
    assert config.backend == "particle"
    assert config.proposal_config("ibfgs-hyb", "particle").pair_convention == PairConvention.GRADIENT_DIFFERENCE
    assert load_config(CONFIG_DIR / "lgss_kalman.toml").pilot_stages == 2


def test_load_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "exp.toml"
    path.write_text('iterations = 400\nburn_in = 100\njobs = 2\nout_dir = "from_file"\n')
    monkeypatch.setenv("QNMH_JOBS", "3")
    monkeypatch.setenv("QNMH_OUT_DIR", "from_env")
    config = load_config(path, {"out_dir": tmp_path / "from_flag", "seed": None})
    assert config.iterations == 400
    assert config.jobs == 3
    assert config.out_dir == tmp_path / "from_flag"
    assert config.seed == 0


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("iterations = \n")
    with pytest.raises(ConfigError):
        load_config(broken)
    bad = tmp_path / "bad.toml"
    bad.write_text("T = 0\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_hash_is_stable_and_sensitive():
    assert ExperimentConfig(seed=1).config_hash() == ExperimentConfig(seed=1).config_hash()
    assert ExperimentConfig(seed=1).config_hash() != ExperimentConfig(seed=2).config_hash()


def test_proposal_labels():
    assert ProposalConfig.from_label("ibfgs-flip", step_size=0.5).label == "ibfgs-flip"
    assert ProposalConfig.from_label("dbfgs", step_size=0.5).label == "dbfgs"
    with pytest.raises(ValueError):
        ProposalConfig.from_label("dbfgs-flip", step_size=0.5)
    with pytest.raises(ValueError):
        ProposalConfig.from_label("ibfgs", step_size=0.5)
    with pytest.raises(ValueError):
        ProposalConfig(kind=ProposalKind.PMH0, step_size=0.5, preconditioner=[[1.0, 0.0], [0.0, -1.0]])


# ---------------------------
# Storage and runner
# ---------------------------

def test_artifact_store_writes_provenance_sidecar(tmp_path):
    store = ArtifactStore(tmp_path, config_hash="abc123")
    path = store.write_frame("sub/table.csv", pd.DataFrame({"a": [1.0, math.pi]}), seed=5, provenance={"source": "unit"})
    assert path.read_text().splitlines() == ["a", "1", "3.1415926535897931"]
    meta = json.loads((tmp_path / "sub" / "table.csv.meta.json").read_text())
    assert meta["config_hash"] == "abc123" and meta["seed"] == 5
    assert meta["provenance"] == {"source": "unit"}
    store.write_json("values.json", {"x": np.array([1.0, np.inf])})
    assert json.loads((tmp_path / "values.json").read_text()) == {"x": [1.0, None]}


def test_runner_records_failures_and_keeps_order():
    jobs = [ReplicationJob(key=f"job{s}", func=square, kwargs={"offset": 1}, seed=s) for s in range(6)]
    results = run_replications(jobs, max_concurrent=1)
    assert [r.key for r in results] == [f"job{s}" for s in range(6)]
    assert [r.value for r in results if r.ok] == [1, 5, 17]
    failed = [r for r in results if not r.ok]
    assert len(failed) == 3 and all(r.error_type == "RuntimeError" for r in failed)


def test_runner_uses_worker_processes():
    jobs = [ReplicationJob(key=str(s), func=spawn_seeds, kwargs={"n": 2}, seed=s) for s in range(4)]
    results = run_replications(jobs, max_concurrent=2)
    assert all(r.ok for r in results)
    assert [r.value for r in results] == [spawn_seeds(s, 2) for s in range(4)]


def test_runner_rejects_invalid_concurrency():
    with pytest.raises(ValueError):
        run_replications([], max_concurrent=0)


# ---------------------------
# Orchestration
# ---------------------------

def test_run_single_is_reproducible(tmp_path):
    config = small_config(tmp_path)
    first = run_single(config, ArtifactStore(tmp_path / "a"))
    second = run_single(config, ArtifactStore(tmp_path / "b"))
    assert (tmp_path / "a" / "traces" / "kalman_dbfgs.csv").read_bytes() == (tmp_path / "b" / "traces" / "kalman_dbfgs.csv").read_bytes()
    assert first.report.label == "dbfgs"
    assert 0.0 <= first.report.acceptance_rate <= 1.0
    np.testing.assert_array_equal(first.trace.states, second.trace.states)
    for name in ("metrics.json", "posterior.json", "acf.csv", "prior_curves.csv", "hist_phi.csv"):
        assert (tmp_path / "a" / name).is_file()


def test_run_single_with_pilot_preconditioner(tmp_path):
    outcome = run_single(small_config(tmp_path, proposal="pmh1"))
    assert outcome.report.correction_fraction is None
    assert outcome.trace.length == 300


def test_staged_pilot_preconditioner(tmp_path):
    config = small_config(tmp_path, pilot_iterations=400, pilot_stages=2)
    data = simulate_lgss(ParameterVector.natural(config.theta), config.T, seed=config.seed)
    covariance = pilot_run(config, data, "kalman", seed=3)
    assert covariance.shape == (3, 3)
    assert np.linalg.eigvalsh(covariance)[0] > 0
    np.testing.assert_array_equal(covariance, pilot_run(config, data, "kalman", seed=3))
    single = pilot_run(config.model_copy(update={"pilot_stages": 1}), data, "kalman", seed=3)
    assert not np.array_equal(covariance, single)


def test_benchmark_cell_grid(tmp_path):
    config = small_config(tmp_path, proposals=["pmh0", "ibfgs-flip"], replications=2)
    store = ArtifactStore(config.out_dir)
    outcome = run_benchmark(config, store)
    assert [r.label for r in outcome.reports] == ["pmh0", "ibfgs-flip"]
    assert all(r.n_replications == 2 for r in outcome.reports)
    assert not outcome.failures
    table = pd.read_csv(config.out_dir / "benchmark.csv")
    assert list(table["proposal"]) == ["pmh0", "ibfgs-flip"]
    assert (config.out_dir / "traces" / "kalman_ibfgs-flip_rep01.csv").is_file()
    assert (config.out_dir / "benchmark.md").read_text().startswith("| backend |")


def test_marginal_state_estimate_shapes():
    theta = ParameterVector.natural([0.0, 0.9, 0.2, -0.05])
    data = simulate_sv(theta, 40, seed=3)
    draws = np.array([[0.0, 0.9, 0.2, -0.05], [0.1, 0.85, 0.25, 0.0], [-0.1, 0.92, 0.18, -0.1]])
    estimate = marginal_state_estimate(StochasticVolatilityModel(), draws, data, 100, seed=1, paths_per_draw=50)
    assert estimate.n_draws == 3
    assert estimate.mean.shape == (41,)
    assert np.all(estimate.lower <= estimate.upper)
    frame = estimate.to_frame(data)
    assert list(frame.columns) == ["t", "y", "x_mean", "x_lower", "x_upper", "y_lower", "y_upper"]
    assert np.all(frame["y_lower"] < 0) and np.all(frame["y_upper"] > 0)
    with pytest.raises(ValueError):
        marginal_state_estimate(StochasticVolatilityModel(), draws[:0], data, 100, seed=1)


def test_prior_only_chain_samples_the_prior():
    model = StochasticVolatilityModel()
    prior = model.default_prior()
    data = simulate_sv(ParameterVector.natural([0.0, 0.9, 0.2, -0.05]), 10, seed=0)
    proposal = ProposalConfig(kind=ProposalKind.PMH0, step_size=1.0)
    trace = run_chain(model, data, PriorOnlyBackend(model), proposal, 30_000, seed=4, burn_in=2000)
    post = trace.natural[2000:]
    phi = prior.components[1]
    phi_mean = stats.truncnorm.mean((phi.lower - phi.mean) / phi.sd, (phi.upper - phi.mean) / phi.sd, loc=phi.mean, scale=phi.sd)
    assert post[:, 0].mean() == pytest.approx(0.0, abs=0.1)
    assert post[:, 1].mean() == pytest.approx(phi_mean, abs=0.02)
    assert post[:, 2].mean() == pytest.approx(0.2, abs=0.02)


def test_sv_case_study_writes_state_estimate(tmp_path):
    data = simulate_sv(ParameterVector.natural([0.0, 0.9, 0.2, -0.05]), 50, seed=2)
    data_path = write_dataset(data, tmp_path / "returns.csv")
    config = small_config(
        tmp_path,
        model="sv",
        data_path=data_path,
        n_particles=50,
        iterations=60,
        burn_in=20,
        thinning=10,
        T=50,
    )
    store = ArtifactStore(config.out_dir)
    outcome = run_sv_casestudy(config, store)
    assert outcome.states.n_draws == 4
    assert [p.name for p in outcome.summary.parameters] == ["mu", "phi", "sigma_v", "rho"]
    frame = pd.read_csv(config.out_dir / "sv_log_volatility.csv")
    assert len(frame) == 50
    assert (config.out_dir / "traces" / "particle_dbfgs.csv").is_file()


def test_sv_case_study_needs_sv_model(tmp_path):
    with pytest.raises(ConfigError):
        run_sv_casestudy(small_config(tmp_path))


# ---------------------------
# Benchmark reproduction
# ---------------------------

@pytest.mark.slow
def test_kalman_benchmark_reproduces_qualitative_ranking(tmp_path):
    data = simulate_lgss(ParameterVector.natural([0.2, 0.5, 1.0]), 500, seed=0)
    data_path = write_dataset(data, tmp_path / "lgss.csv")
    undamped = ["ibfgs-flip", "ibfgs-reg", "ibfgs-hyb"]
    config = ExperimentConfig(
        data_path=data_path,
        proposals=["pmh0", "dbfgs", *undamped],
        undamped_pairs="gradient-difference",
        replications=5,
        out_dir=tmp_path / "out",
        record_timing=False,
    )
    outcome = run_benchmark(config)
    assert not outcome.failures
    reports = {r.label: r for r in outcome.reports}
    assert reports["dbfgs"].acceptance_rate >= 0.55
    assert 0.05 <= reports["pmh0"].acceptance_rate <= 0.45
    assert reports["dbfgs"].correction_fraction == 0.0
    for label in undamped:
        assert reports[label].correction_fraction > 0.5
    # lag-M correlation of the M-order chain is counted
    assert reports["dbfgs"].max_if_median > 5.0
    assert reports["dbfgs"].max_if_median < max(reports[label].max_if_median for label in undamped)
    run = run_single(config.model_copy(update={"proposal": "dbfgs"}))
    phi = next(p for p in run.summary.parameters if p.name == "phi")
    assert abs(phi.mean - 0.5) < 0.15


@pytest.mark.slow
def test_particle_benchmark_rows(tmp_path):
    data = simulate_lgss(ParameterVector.natural([0.2, 0.5, 1.0]), 500, seed=0)
    data_path = write_dataset(data, tmp_path / "lgss.csv")
    config = ExperimentConfig(
        data_path=data_path,
        backend="particle",
        backends=["particle"],
        n_particles=1000,
        proposals=["pmh0", "pmh1", "dbfgs", "ibfgs-hyb"],
        undamped_pairs="gradient-difference",
        replications=3,
        jobs=3,
        out_dir=tmp_path / "out",
    )
    outcome = run_benchmark(config)
    assert not outcome.failures
    reports = {r.label: r for r in outcome.reports}
    assert list(reports) == ["pmh0", "pmh1", "dbfgs", "ibfgs-hyb"]
    assert reports["dbfgs"].correction_fraction == 0.0
    assert reports["ibfgs-hyb"].correction_fraction > 0.5
    for report in reports.values():
        assert 0.0 < report.acceptance_rate < 1.0
        assert 1.0 <= report.max_if_median < math.inf
        assert report.time_per_effective_sample_ms > 0.0


@pytest.mark.slow
def test_sv_case_study_posterior_properties(tmp_path):
    data = simulate_sv(ParameterVector.natural([0.5, 0.95, 0.2, -0.05]), 500, seed=11)
    data_path = write_dataset(data, tmp_path / "returns.csv")
    config = ExperimentConfig(
        model="sv",
        data_path=data_path,
        n_particles=1500,
        iterations=10_000,
        burn_in=3_000,
        thinning=50,
        out_dir=tmp_path / "out",
        record_timing=False,
    )
    outcome = run_sv_casestudy(config)
    assert np.all(np.isfinite(outcome.trace.log_target))
    phi = outcome.trace.natural[config.burn_in:, 1]
    assert np.mean(phi > 0.8) > 0.95
    correlation = stats.spearmanr(np.abs(data.observations), outcome.states.mean[1:]).correlation
    assert correlation > 0.0
