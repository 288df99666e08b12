import numpy as np
import pytest
from scipy import stats

from data.models.ssm_models import DataSet, ParameterVector, PriorSpec
from src.qnmh.errors import DataValidationError, ModelSupportError
from src.qnmh.kalman import KalmanBackend, kalman_filter, rts_smoother, score_kalman
from src.qnmh.models import StochasticVolatilityModel, log_target, simulate_lgss, to_unconstrained

OBS_VAR = 0.25


def _dense_joint(theta, T):
    """Joint Gaussian of (x_0..x_T) under the stationary AR(1) law."""
    mu, phi, sigma_v = theta
    lags = np.abs(np.subtract.outer(np.arange(T + 1), np.arange(T + 1)))
    cov_x = sigma_v ** 2 / (1.0 - phi ** 2) * phi ** lags
    return np.full(T + 1, mu), cov_x


def dense_log_likelihood(theta, y):
    T = y.size
    mean_x, cov_x = _dense_joint(theta, T)
    cov_y = cov_x[1:, 1:] + OBS_VAR * np.eye(T)
    return stats.multivariate_normal(mean_x[1:], cov_y).logpdf(y)


def dense_smoother(theta, y):
    T = y.size
    mean_x, cov_x = _dense_joint(theta, T)
    cov_y = cov_x[1:, 1:] + OBS_VAR * np.eye(T)
    gain = cov_x[:, 1:] @ np.linalg.inv(cov_y)
    post_mean = mean_x + gain @ (y - mean_x[1:])
    post_cov = cov_x - gain @ cov_x[1:, :]
    return post_mean, post_cov


@pytest.mark.parametrize("T,seed", [(1, 0), (10, 1), (50, 2)])
def test_kalman_log_likelihood_matches_dense_gaussian(T, seed):
    theta = np.array([0.2, 0.5, 1.0])
    data = simulate_lgss(ParameterVector.natural(theta), T, seed)
    result = kalman_filter(ParameterVector.natural(theta), data)
    assert result.log_likelihood == pytest.approx(dense_log_likelihood(theta, data.observations), rel=1e-10, abs=1e-10)
    assert result.log_likelihood_terms.size == T


def test_rts_smoother_matches_dense_posterior():
    theta = np.array([-0.3, 0.8, 0.7])
    data = simulate_lgss(ParameterVector.natural(theta), 40, seed=5)
    smoothed = rts_smoother(kalman_filter(ParameterVector.natural(theta), data), ParameterVector.natural(theta))
    post_mean, post_cov = dense_smoother(theta, data.observations)
    np.testing.assert_allclose(smoothed.smoothed_mean, post_mean, atol=1e-10)
    np.testing.assert_allclose(smoothed.smoothed_var, np.diag(post_cov), atol=1e-10)
    np.testing.assert_allclose(smoothed.cross_cov[1:], np.diag(post_cov, k=-1), atol=1e-10)


def test_score_kalman_matches_central_differences():
    rng = np.random.default_rng(11)
    data = simulate_lgss(ParameterVector.natural([0.2, 0.5, 1.0]), 50, seed=3)
    backend = KalmanBackend()
    prior = PriorSpec.lgss_default()
    h = 1e-5
    for _ in range(20):
        natural = np.array([rng.uniform(-1, 1), rng.uniform(-0.9, 0.9), rng.uniform(0.5, 1.5)])
        theta_bar = to_unconstrained(ParameterVector.natural(natural))
        analytic = score_kalman(theta_bar, data, prior)
        numeric = np.zeros(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            up = log_target(ParameterVector.unconstrained(theta_bar.values + e), data, backend, prior)
            down = log_target(ParameterVector.unconstrained(theta_bar.values - e), data, backend, prior)
            numeric[j] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-5)


def test_evaluate_without_gradient_matches_log_target():
    data = simulate_lgss(ParameterVector.natural([0.2, 0.5, 1.0]), 30, seed=4)
    theta_bar = to_unconstrained(ParameterVector.natural([0.0, 0.4, 0.9]))
    backend = KalmanBackend()
    evaluation = backend.evaluate(theta_bar.values, data, PriorSpec.lgss_default(), need_gradient=False)
    assert evaluation.gradient is None
    assert evaluation.log_target == pytest.approx(log_target(theta_bar, data, backend))


def test_kalman_rejects_sv_model_and_bad_data():
    with pytest.raises(ModelSupportError):
        KalmanBackend(StochasticVolatilityModel())
    with pytest.raises(DataValidationError):
        kalman_filter(ParameterVector.natural([0.2, 0.5, 1.0]), DataSet(observations=[0.1, np.nan, 0.3]))
    with pytest.raises(ModelSupportError):
        kalman_filter(ParameterVector.natural([0.2, 1.0, 1.0]), DataSet(observations=[0.1]))
