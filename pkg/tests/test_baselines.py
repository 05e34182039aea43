import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odit.baselines import (DataFilter, GaussianModel, GCusum, InfoMetricDetector, OracleCusum,
                            WindowDetectorConfig, cusum_step, data_filter, discretized_gaussian,
                            discretized_poisson, gcusum_increments, gcusum_step, info_metric_step,
                            log_likelihood_ratio, renyi_divergence, run_baseline, symmetric_renyi)
from odit.core import ConfigError, DataError


def test_cusum_step_examples():
    f0 = GaussianModel([0.0], 1.0)
    f1 = GaussianModel([1.0], 1.0)
    assert cusum_step(0.0, [0.5], f0, f1) == pytest.approx(0.0)
    assert cusum_step(0.0, [1.0], f0, f1) == pytest.approx(0.5)
    assert cusum_step(2.0, [3.0], f0, f0) == 2.0


def test_full_covariance_matches_independent():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10, 3))
    var = np.array([1.0, 2.0, 3.0])
    a = GaussianModel(np.zeros(3), var)
    b = GaussianModel(np.zeros(3), np.diag(var))
    np.testing.assert_allclose(a.logpdf(X), b.logpdf(X), rtol=1e-12)
    assert not b.independent and a.independent


def test_logpdf_against_scipy():
    from scipy.stats import multivariate_normal
    rng = np.random.default_rng(1)
    A = rng.standard_normal((4, 4))
    cov = A @ A.T + np.eye(4)
    m = GaussianModel(np.ones(4), cov)
    X = rng.standard_normal((6, 4))
    np.testing.assert_allclose(m.logpdf(X), multivariate_normal(np.ones(4), cov).logpdf(X), rtol=1e-10)
    np.testing.assert_allclose(m.mahalanobis_solve(np.ones(4)), np.linalg.solve(cov, np.ones(4)))
    S = m.sample(20000, rng)
    np.testing.assert_allclose(np.cov(S.T), cov, atol=0.25)


def test_gaussian_model_errors():
    with pytest.raises(DataError):
        GaussianModel([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DataError):
        GaussianModel([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(DataError):
        GaussianModel([0.0], [0.0])
    with pytest.raises(DataError):
        OracleCusum(GaussianModel([0.0], 1.0), GaussianModel([0.0, 0.0], 1.0))


def test_oracle_path_and_run():
    f0 = GaussianModel([0.0], 1.0)
    f1 = GaussianModel([1.0], 1.0)
    det = OracleCusum(f0, f1)
    X = np.array([[1.0]] * 10)
    np.testing.assert_allclose(det.path(X), 0.5 * np.arange(1, 11))
    state = run_baseline(det, X, 2.0)
    assert state.alarm_time_T == 4 and state.tau_hat == 0
    np.testing.assert_allclose(log_likelihood_ratio(X, f0, f1), 0.5)


def test_gcusum_null_and_shift():
    mean, std = np.zeros(3), np.ones(3)
    inc = gcusum_increments(np.zeros((1, 3)), mean, std)
    assert np.all(inc <= 0)
    states, total = gcusum_step(np.zeros(3), np.array([3.0, 0.0, 0.0]), mean, std)
    assert states[0] == pytest.approx(4.5) and total == pytest.approx(4.5)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 3))
    X[:, 1] += 3.0
    paths = GCusum(mean, std).stream_paths(X)
    # shifted stream drifts by KL = shift^2 / 2 per step
    slope = (paths[-1, 1] - paths[199, 1]) / 200
    assert slope == pytest.approx(4.5, rel=0.15)
    assert paths[-1, 0] < 20


def test_gcusum_fit_and_sum():
    rng = np.random.default_rng(0)
    X = rng.normal(5, 2, (5000, 2))
    det = GCusum.fit(X)
    np.testing.assert_allclose(det.mean, [5, 5], atol=0.1)
    np.testing.assert_allclose(det.path(X[:50]), det.stream_paths(X[:50]).sum(axis=1))
    with pytest.raises(DataError):
        GCusum(np.zeros(2), np.array([1.0, 0.0]))


def test_renyi_properties():
    bins = np.arange(40.0)
    p = discretized_gaussian(np.array([10.0]), np.array([3.0]), bins)[0]
    assert renyi_divergence(p, p, 0.5) == pytest.approx(0.0, abs=1e-12)
    q = discretized_poisson(np.array(10.0), bins)
    assert symmetric_renyi(p, q, 0.5) > 0
    # approaches 0 as q approaches p in total variation
    prev = np.inf
    for eps in [0.5, 0.1, 0.01]:
        mix = (1 - eps) * p + eps * q
        cur = float(symmetric_renyi(p, mix, 0.5))
        assert cur < prev
        prev = cur
    assert prev < 1e-3
    with pytest.raises(DataError):
        discretized_poisson(np.array(0.0), bins)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
       st.floats(0.1, 0.9))
def test_renyi_nonnegative(p, q, alpha):
    n = min(len(p), len(q))
    p = np.array(p[:n]) / sum(p[:n])
    q = np.array(q[:n]) / sum(q[:n])
    assert renyi_divergence(p, q, alpha) >= -1e-12


def test_info_metric_detector():
    rng = np.random.default_rng(0)
    mean, std = np.array([40.0, 60.0]), np.array([2.0, 3.0])
    det = InfoMetricDetector(mean, std)
    np.testing.assert_allclose(det.train_pmf.sum(axis=1), 1.0)
    X = rng.normal(mean, std, (30, 2))
    X[20:, 0] += 15
    path = det.path(X)
    assert np.all(path[:4] == 0)
    assert path[25] > path[:19].max()
    assert det.path(X[:3]).tolist() == [0, 0, 0]
    assert info_metric_step(mean, std, X[:5]) == pytest.approx(path[4])
    with pytest.raises(ConfigError):
        WindowDetectorConfig(window_W=1)
    with pytest.raises(ConfigError):
        WindowDetectorConfig(renyi_alpha=1.0)


def test_data_filter():
    assert not data_filter([1.0, 2.0], [5.0, 5.0]).any()
    assert data_filter([6.0, 2.0], [5.0, 5.0]).tolist() == [True, False]
    rng = np.random.default_rng(0)
    nominal = rng.standard_normal((20000, 3))
    filt = DataFilter.fit(nominal, 0.99)
    fresh = rng.standard_normal((20000, 3))
    assert abs(filt.flags(fresh).mean() - 0.01) < 0.003
    assert filt.flags(fresh + 5).mean() > 0.99


def test_run_baseline_no_alarm():
    det = OracleCusum(GaussianModel([0.0], 1.0), GaussianModel([1.0], 1.0))
    state = run_baseline(det, np.full((5, 1), -1.0), 1.0)
    assert not state.alarm and state.t == 5 and state.last_zero_time == 5
