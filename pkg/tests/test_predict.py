"""Plug-in and posterior-averaged predictions."""

import numpy as np
import pytest
from scipy import stats

from conftest import corr, exp_model
from gpcalib.mcmc import McmcConfig, PosteriorSamples, run_mcmc
from gpcalib.mle import MleResult, run_mle
from gpcalib.model import CalibrationProblem, default_lambda_z
from gpcalib.predict import interval_quantiles, predict_plugin, predict_posterior


def zero_model(x, theta):
    return np.zeros(np.asarray(x).shape[0])


def shift_model(x, theta):
    return np.full(np.asarray(x).shape[0], theta[0])


def _fit(theta, sigma0_sq, gamma=None, eta=None, theta_m=None, disc="gasp"):
    return MleResult(discrepancy=disc, theta=np.atleast_1d(theta), gamma=None if gamma is None else np.atleast_1d(gamma),
                     eta=eta, theta_m=theta_m, sigma0_sq=sigma0_sq, loglik=0.0)


class TestQuantiles:
    def test_constant(self):
        q = interval_quantiles(np.full((50, 3), 2.0), [0.025, 0.5, 0.975])
        np.testing.assert_array_equal(q, 2.0)

    def test_standard_normal(self):
        z = np.random.default_rng(0).standard_normal((100000, 1))
        q = interval_quantiles(z, [0.025, 0.975])[:, 0]
        np.testing.assert_allclose(q, [-1.96, 1.96], atol=0.02)

    def test_median(self):
        d = np.array([[3.0], [1.0], [2.0], [10.0]])
        assert interval_quantiles(d, [0.5])[0, 0] == 2.5

    def test_type7_hand_value(self):
        d = np.arange(1.0, 6.0)
        # h = (n - 1) p = 1.2 -> 2 + 0.2 * (3 - 2)
        assert interval_quantiles(d, [0.3])[0, 0] == pytest.approx(2.2)

    def test_errors(self):
        with pytest.raises(ValueError):
            interval_quantiles(np.zeros((0, 2)), [0.5])
        with pytest.raises(ValueError):
            interval_quantiles(np.zeros((4, 2)), [0.9, 0.1])
        with pytest.raises(ValueError):
            interval_quantiles(np.zeros((4, 2)), [0.0, 0.5])


class TestPlugin:
    def test_interpolation_limit(self):
        x = np.array([0.1, 0.4, 0.8])
        y = np.array([1.0, -0.5, 0.7])
        p = CalibrationProblem(x, y, zero_model, [[0, 1]], discrepancy="gasp")
        # sigma^2 = sigma0^2 / eta stays fixed while the nugget vanishes
        fit = _fit([0.5], 0.3 * 1e-10, gamma=[0.4], eta=1e-10)
        res = predict_plugin(fit, p, x, interval=[0.025, 0.975])
        np.testing.assert_allclose(res.mean, y, atol=1e-6)
        np.testing.assert_allclose(res.upper - res.lower, 0.0, atol=1e-3)

    def test_no_discrepancy_noise_interval(self):
        x = np.linspace(0, 1, 5)
        p = CalibrationProblem(x, np.arange(5.0), shift_model, [[-5, 5]], discrepancy="none")
        fit = _fit([2.0], 0.49, disc="none")
        w = np.array([1.0, 4.0])
        res = predict_plugin(fit, p, [0.2, 0.6], interval=[0.025, 0.975], test_weights=w)
        np.testing.assert_allclose(res.mean, 2.0)
        z = stats.norm.ppf(0.975)
        np.testing.assert_allclose(res.upper, 2.0 + z * 0.7 / np.sqrt(w), rtol=1e-12)
        np.testing.assert_allclose(res.lower, 2.0 - z * 0.7 / np.sqrt(w), rtol=1e-12)

    def test_three_point_dense_oracle(self):
        x = np.array([0.0, 0.35, 1.0])
        y = np.array([0.4, 1.1, -0.3])
        xs = np.array([0.2, 0.7])
        g, eta, s2 = 0.5, 0.6, 0.8
        p = CalibrationProblem(x, y, zero_model, [[0, 1]], discrepancy="gasp")
        res = predict_plugin(_fit([0.5], s2, gamma=[g], eta=eta), p, xs, interval=[0.5, 0.975])
        R = corr(x, [g])
        Rt = R / eta + np.eye(3)
        Ri = np.linalg.inv(Rt)
        allx = np.concatenate([x, xs])
        r = corr(allx, [g])[:3, 3:]
        mean = r.T @ Ri @ y / eta
        kstar = 1.0 - np.diag(r.T @ Ri @ r) / eta
        np.testing.assert_allclose(res.mean, mean, atol=1e-12)
        sd = np.sqrt(s2 * kstar / eta)
        np.testing.assert_allclose(res.bounds[1], mean + stats.norm.ppf(0.975) * sd, atol=1e-12)

    def test_sgasp_dense_oracle(self):
        x = np.array([0.0, 0.3, 0.55, 1.0])
        y = np.array([0.4, 1.1, 0.2, -0.3])
        xs = np.array([0.2, 0.9])
        g, eta = 0.4, 0.3
        p = CalibrationProblem(x, y, zero_model, [[0, 1]], discrepancy="sgasp")
        res = predict_plugin(_fit([0.5], 1.0, gamma=[g], eta=eta, disc="sgasp"), p, xs, interval=[0.975])
        lz = default_lambda_z([g], eta, 4, [1.0])
        allx = np.concatenate([x, xs])
        K = corr(allx, [g])
        R, r, Kss = K[:4, :4], K[:4, 4:], K[4:, 4:]
        A = np.linalg.inv(R + 4 / lz * np.eye(4))
        Rz = R - R @ A @ R
        rz = r - R @ A @ r
        kz = np.diag(Kss - r.T @ A @ r)
        Ri = np.linalg.inv(Rz / eta + np.eye(4))
        mean = rz.T @ Ri @ y / eta
        kstar = kz - np.diag(rz.T @ Ri @ rz) / eta
        np.testing.assert_allclose(res.mean, mean, atol=1e-10)
        np.testing.assert_allclose(res.upper, mean + stats.norm.ppf(0.975) * np.sqrt(kstar / eta), atol=1e-10)

    def test_data_interval_wider(self, small_problem):
        p = small_problem("gasp")
        fit = run_mle(p, n_restarts=2, seed=0)
        xs = np.linspace(0, 3, 20)
        Hs = np.column_stack([np.ones(20), xs])
        a = predict_plugin(fit, p, xs, Hs, interval=[0.025, 0.975])
        b = predict_plugin(fit, p, xs, Hs, interval=[0.025, 0.975], interval_data=True)
        assert np.all(b.upper - b.lower >= a.upper - a.lower)

    def test_trend_basis_required(self, small_problem):
        p = small_problem("gasp")
        fit = run_mle(p, n_restarts=1, seed=0)
        with pytest.raises(ValueError, match="X_testing"):
            predict_plugin(fit, p, [0.5])

    def test_no_trend_levels_coincide(self, small_problem):
        p = small_problem("gasp", trend=False)
        fit = run_mle(p, n_restarts=1, seed=0)
        res = predict_plugin(fit, p, np.linspace(0, 3, 7))
        np.testing.assert_array_equal(res.math_model_mean_no_trend, res.math_model_mean)


@pytest.fixture(scope="module")
def chain():
    rng = np.random.default_rng(4)
    x = np.sort(rng.random(12)) * 3
    y = 3.5 * np.exp(-1.7 * x) + 1.5 + 0.2 * rng.standard_normal(12)
    p = CalibrationProblem(x, y, exp_model, [[0, 5], [-2, 2]], discrepancy="gasp")
    return p, run_mcmc(p, McmcConfig(n_samples=1500, burn_in=500, seed=2))


class TestPosterior:
    def test_single_draw_matches_plugin(self, small_problem):
        p = small_problem("sgasp")
        row = np.array([[1.6, 0.2, 0.3, -1.2, 0.05, 1.4, 0.1]])
        samples = PosteriorSamples(samples=row, columns=[""] * 7, discrepancy="sgasp", p_theta=2, p_x=1,
                                   q=2, accept_theta=np.array([], dtype=int),
                                   accept_kernel=np.array([], dtype=int), n_iterations=1)
        fit = _fit([1.6, 0.2], 0.05, gamma=np.exp([-0.3]), eta=float(np.exp(-1.2)),
                   theta_m=np.array([1.4, 0.1]), disc="sgasp")
        xs = np.linspace(0, 3, 9)
        Hs = np.column_stack([np.ones(9), xs])
        a = predict_posterior(samples, p, xs, Hs)
        b = predict_plugin(fit, p, xs, Hs)
        for attr in ("math_model_mean_no_trend", "math_model_mean", "mean"):
            np.testing.assert_allclose(getattr(a, attr), getattr(b, attr), atol=1e-10)

    def test_decomposition(self, chain):
        p, post = chain
        xs = np.linspace(0, 3, 15)
        res = predict_posterior(post, p, xs, interval=[0.025, 0.975], seed=0)
        assert res.n_draws == len(post) and res.n_skipped == 0
        np.testing.assert_array_equal(res.math_model_mean, res.math_model_mean_no_trend)
        assert np.all(res.lower <= res.mean) and np.all(res.mean <= res.upper)

    def test_data_bounds_wider(self, chain):
        p, post = chain
        xs = np.linspace(0, 3, 15)
        a = predict_posterior(post, p, xs, interval=[0.025, 0.975], seed=1)
        b = predict_posterior(post, p, xs, interval=[0.025, 0.975], interval_data=True, seed=1)
        assert np.all(b.upper - b.lower >= a.upper - a.lower)

    def test_max_draws_and_determinism(self, chain):
        p, post = chain
        a = predict_posterior(post, p, [0.5, 1.5], interval=[0.5], seed=3, max_draws=100)
        b = predict_posterior(post, p, [0.5, 1.5], interval=[0.5], seed=3, max_draws=100)
        assert a.n_draws == 100
        np.testing.assert_array_equal(a.bounds, b.bounds)

    def test_failed_draws_are_skipped(self, chain):
        p, post = chain

        def flaky(x, theta):
            if theta[0] > np.median(post.theta[:, 0]):
                return np.full(np.asarray(x).shape[0], np.nan)
            return np.zeros(np.asarray(x).shape[0])

        res = predict_posterior(post, p, [0.5], model=flaky)
        assert res.n_skipped > 0 and res.n_draws + res.n_skipped == len(post)

    def test_empty(self, chain):
        p, post = chain
        empty = PosteriorSamples(post.samples[:0], post.columns, "gasp", 2, 1, 0, post.accept_theta,
                                 post.accept_kernel, post.n_iterations)
        with pytest.raises(ValueError):
            predict_posterior(empty, p, [0.5])


def test_csv_output(tmp_path):
    x = np.linspace(0, 1, 4)
    p = CalibrationProblem(x, np.ones(4), shift_model, [[-5, 5]], discrepancy="none")
    res = predict_plugin(_fit([1.0], 0.1, disc="none"), p, [0.25, 1 / 3], interval=[0.025, 0.975])
    path = tmp_path / "pred.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x_1,math_model_mean_no_trend,math_model_mean,mean,q_0.025,q_0.975"
    assert lines[2].split(",")[0] == repr(1 / 3)
