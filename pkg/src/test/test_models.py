import math

import numpy as np
import pytest
from scipy import integrate, stats

from data.models.ssm_models import (
    DataSet,
    GammaPrior,
    ModelKind,
    ModelSpec,
    ParameterVector,
    PriorSpec,
    TruncatedGaussianPrior,
)
from src.qnmh.errors import CovarianceNotPositiveDefiniteError, ModelSupportError, ParameterSpaceError
from src.qnmh.models import (
    LinearGaussianModel,
    PriorOnlyBackend,
    StochasticVolatilityModel,
    log_jacobian,
    log_prior,
    log_target,
    simulate_lgss,
    simulate_sv,
    sv_transition_moments,
    to_natural,
    to_unconstrained,
)

RNG = np.random.default_rng(20240611)


def _random_natural(dim: int) -> np.ndarray:
    values = [RNG.normal(), RNG.uniform(-0.95, 0.95), RNG.uniform(0.1, 2.0)]
    if dim == 4:
        values.append(RNG.uniform(-0.95, 0.95))
    return np.array(values)


@pytest.mark.parametrize("dim", [3, 4])
def test_reparametrization_round_trip(dim):
    for _ in range(50):
        theta = ParameterVector.natural(_random_natural(dim))
        back = to_natural(to_unconstrained(theta))
        assert back.space == theta.space
        np.testing.assert_allclose(back.values, theta.values, rtol=0, atol=1e-12)


def test_wrong_space_is_rejected():
    theta = ParameterVector.natural([0.2, 0.5, 1.0])
    with pytest.raises(ParameterSpaceError):
        to_natural(theta)
    with pytest.raises(ParameterSpaceError):
        log_jacobian(theta)


def test_parameter_vector_is_read_only():
    theta = ParameterVector.natural([0.2, 0.5, 1.0])
    with pytest.raises(ValueError):
        theta.values[0] = 1.0


@pytest.mark.parametrize("model", [LinearGaussianModel(), StochasticVolatilityModel()])
def test_log_jacobian_matches_numerical_derivative(model):
    theta_bar = model.to_unconstrained(ParameterVector.natural(_random_natural(model.dim))).values
    h = 1e-6
    numeric = 0.0
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = h
        numeric += math.log((model.natural_values(theta_bar + e)[j] - model.natural_values(theta_bar - e)[j]) / (2 * h))
    assert model.log_jacobian(theta_bar) == pytest.approx(numeric, abs=1e-7)


def test_truncated_gaussian_integrates_to_one_and_vanishes_outside():
    prior = TruncatedGaussianPrior(mean=0.95, sd=0.05, lower=-1.0, upper=1.0)
    mass, _ = integrate.quad(lambda x: math.exp(prior.log_density(x)), -1.0, 1.0, points=[0.95], limit=200)
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert prior.log_density(1.0) == -math.inf
    assert prior.log_density(-1.5) == -math.inf


def test_gamma_prior_has_mean_shape_over_rate():
    prior = GammaPrior(shape=2.0, rate=10.0)
    mean, _ = integrate.quad(lambda x: x * math.exp(prior.log_density(x)), 0.0, np.inf)
    assert mean == pytest.approx(0.2, rel=1e-8)
    assert prior.log_density(0.0) == -math.inf


def test_log_prior_outside_support_is_minus_infinity():
    prior = PriorSpec.lgss_default()
    assert log_prior(ParameterVector.natural([0.0, 1.2, 1.0]), prior) == -math.inf
    assert log_prior(ParameterVector.natural([0.0, 0.5, -1.0]), prior) == -math.inf
    assert math.isfinite(log_prior(ParameterVector.natural([0.0, 0.5, 1.0]), prior))


def test_lgss_observation_variance_is_fixed():
    with pytest.raises(ValueError):
        ModelSpec(kind=ModelKind.LGSS, observation_sd=1.0)
    assert LinearGaussianModel().observation_variance == pytest.approx(0.25)


def test_dataset_contract():
    with pytest.raises(ValueError):
        DataSet(observations=[])
    with pytest.raises(ValueError):
        DataSet(observations=[1.0, 2.0], states=[0.0, 1.0])
    assert DataSet(observations=[1.0, 2.0], states=[0.0, 1.0, 2.0]).T == 2


# ---------------------------
# Simulation
# ---------------------------

def test_simulate_lgss_shapes_and_determinism():
    theta = ParameterVector.natural([0.2, 0.5, 1.0])
    first = simulate_lgss(theta, 500, seed=7)
    second = simulate_lgss(theta, 500, seed=7)
    assert first.T == 500 and first.states.size == 501
    np.testing.assert_array_equal(first.observations, second.observations)
    assert not np.array_equal(first.observations, simulate_lgss(theta, 500, seed=8).observations)


def test_simulate_lgss_moments():
    theta = ParameterVector.natural([0.2, 0.5, 1.0])
    data = simulate_lgss(theta, 20_000, seed=1)
    stationary_var = 1.0 / (1.0 - 0.25)
    assert np.mean(data.states) == pytest.approx(0.2, abs=0.05)
    assert np.var(data.observations) == pytest.approx(stationary_var + 0.25, rel=0.05)


@pytest.mark.parametrize("values,T", [([0.2, 1.0, 1.0], 10), ([0.2, 0.5, 0.0], 10), ([0.2, 0.5, 1.0], 0)])
def test_simulate_lgss_rejects_invalid_input(values, T):
    with pytest.raises(ModelSupportError):
        simulate_lgss(ParameterVector.natural(values), T, seed=0)


def test_simulate_sv_reports_non_positive_definite_covariance():
    # sigma_v^2 exp(x) > rho^2 needs x > 4.4 here
    with pytest.raises(CovarianceNotPositiveDefiniteError) as err:
        simulate_sv(ParameterVector.natural([0.0, 0.9, 0.1, 0.9]), 100, seed=0)
    assert err.value.t >= 1


def test_simulate_sv_runs_for_valid_parameters():
    data = simulate_sv(ParameterVector.natural([0.0, 0.9, 0.2, -0.05]), 300, seed=3)
    assert data.T == 300 and np.all(np.isfinite(data.observations))


def test_sv_transition_moments_match_gaussian_conditioning():
    theta = np.array([0.3, 0.9, 0.4, -0.1])
    for x_t, y_t in [(0.0, 1.2), (0.5, -0.7), (-0.2, 0.0)]:
        mean_joint = np.array([theta[0] + theta[1] * (x_t - theta[0]), 0.0])
        cov = np.array([[theta[2] ** 2, theta[3]], [theta[3], math.exp(x_t)]])
        cond_mean = mean_joint[0] + cov[0, 1] / cov[1, 1] * (y_t - mean_joint[1])
        cond_var = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
        mean, var = sv_transition_moments(theta, x_t, y_t)
        assert float(mean) == pytest.approx(cond_mean, abs=1e-14)
        assert float(var) == pytest.approx(cond_var, abs=1e-14)


def test_sv_without_leverage_factorizes():
    theta = np.array([0.3, 0.9, 0.4, 0.0])
    model = StochasticVolatilityModel()
    x_next = np.array([0.7])
    for x_t, y_t in [(0.0, 1.2), (0.5, -0.7), (-0.2, 0.0)]:
        ar_mean = theta[0] + theta[1] * (x_t - theta[0])
        mean, var = sv_transition_moments(theta, x_t, y_t)
        assert float(mean) == pytest.approx(ar_mean, abs=1e-14)
        assert float(var) == pytest.approx(theta[2] ** 2, abs=1e-14)
        joint = stats.multivariate_normal([ar_mean, 0.0], np.diag([theta[2] ** 2, math.exp(x_t)])).logpdf([x_next[0], y_t])
        split = model.log_observation(theta, y_t, np.array([x_t]))[0] + stats.norm(ar_mean, theta[2]).logpdf(x_next[0])
        assert joint == pytest.approx(split, abs=1e-12)
        score = model.transition_score(theta, np.array([x_t]), x_next, y_prev=y_t)
        ar_score = LinearGaussianModel().transition_score(theta[:3], np.array([x_t]), x_next)
        np.testing.assert_allclose(score[:, :3], ar_score, atol=1e-12)


# ---------------------------
# Complete-data score terms
# ---------------------------

def _numeric_gradient(fn, theta, h=1e-6):
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        grad[j] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return grad


def test_sv_transition_score_matches_finite_differences():
    model = StochasticVolatilityModel()
    theta = np.array([0.1, 0.92, 0.3, -0.05])
    x_prev, x_next, y_prev = 0.4, 0.55, -1.1

    def log_density(th):
        mean, var = sv_transition_moments(th, x_prev, y_prev)
        return float(stats.norm.logpdf(x_next, loc=mean, scale=math.sqrt(var)))

    analytic = model.transition_score(theta, x_prev, x_next, y_prev)[0]
    np.testing.assert_allclose(analytic, _numeric_gradient(log_density, theta), rtol=1e-6, atol=1e-8)


def test_initial_score_matches_finite_differences():
    model = LinearGaussianModel()
    theta = np.array([0.2, 0.6, 0.8])
    x0 = 1.3

    def log_density(th):
        mean, var = model.stationary_moments(th)
        return float(stats.norm.logpdf(x0, loc=mean, scale=math.sqrt(var)))

    np.testing.assert_allclose(model.initial_score(theta, x0)[0], _numeric_gradient(log_density, theta), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kind", [ModelKind.LGSS, ModelKind.SV_LEVERAGE])
def test_prior_only_gradient_matches_finite_differences(kind):
    model = LinearGaussianModel() if kind == ModelKind.LGSS else StochasticVolatilityModel()
    backend = PriorOnlyBackend(model)
    prior = model.default_prior()
    data = DataSet(observations=[0.0])
    natural = np.array([0.1, 0.9, 0.3] + ([0.2] if model.dim == 4 else []))
    theta_bar = model.to_unconstrained(ParameterVector.natural(natural)).values
    evaluation = backend.evaluate(theta_bar, data, prior)

    def target(tb):
        return log_target(ParameterVector.unconstrained(tb), data, backend, prior)

    assert evaluation.log_target == pytest.approx(target(theta_bar), abs=1e-12)
    np.testing.assert_allclose(evaluation.gradient, _numeric_gradient(target, theta_bar), rtol=1e-6, atol=1e-7)
