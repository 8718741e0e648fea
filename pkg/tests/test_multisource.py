"""Multiple sources sharing calibration parameters."""

import numpy as np
import pytest

from conftest import corr, dense_reduced_loglik, exp_model
from gpcalib import testbeds as tb
from gpcalib.mcmc import McmcConfig, PosteriorSamples
from gpcalib.model import CalibrationProblem, profile_loglik
from gpcalib.multisource import (
    MsPosterior,
    MultiSourceProblem,
    Source,
    gibbs_shared_delta,
    ms_loglik_no_bias,
    ms_mcmc,
    ms_predict,
    stack_sources,
)
from gpcalib.predict import predict_posterior


def sin_model(x, theta):
    return np.sin(theta[0] * np.asarray(x, dtype=float).reshape(-1))


def _data(seed, n=6):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.random(n)) * 3
    return x, 3.5 * np.exp(-1.7 * x) + 1.5 + 0.2 * rng.standard_normal(n)


def _problem(ys, x, disc="gasp", **kw):
    return MultiSourceProblem([Source(x, y, exp_model, discrepancy=disc) for y in ys],
                              [[0, 5], [-2, 2]], **kw)


class TestLikelihood:
    @pytest.mark.parametrize("disc", ["gasp", "sgasp"])
    def test_single_source(self, disc):
        x, y = _data(0)
        ms = _problem([y], x, disc)
        single = CalibrationProblem(x, y, exp_model, [[0, 5], [-2, 2]], discrepancy=disc)
        params = np.array([1.5, 0.2, 0.4, -0.8])
        assert ms_loglik_no_bias(ms, params) == pytest.approx(profile_loglik(single, params), abs=1e-12)

    def test_identical_sources_double(self):
        x, y = _data(1)
        one = ms_loglik_no_bias(_problem([y], x), [1.5, 0.2, 0.4, -0.8])
        two = ms_loglik_no_bias(_problem([y, y], x), [1.5, 0.2, 0.4, -0.8, 0.4, -0.8])
        assert two == pytest.approx(2 * one, abs=1e-10)

    def test_block_oracle(self):
        rng = np.random.default_rng(2)
        x1, y1 = _data(3, n=5)
        x2 = np.sort(rng.random(4)) * 3
        y2 = np.cos(x2) + 0.1 * rng.standard_normal(4)
        ms = MultiSourceProblem(
            [Source(x1, y1, exp_model), Source(x2, y2, sin_model, index_theta=[1], discrepancy="gasp")],
            [[0, 5], [-2, 2]],
        )
        th = np.array([1.2, 0.9])
        kp = [(0.6, 0.5), (0.3, 2.0)]
        params = np.concatenate([th, [np.log(1 / kp[0][0]), np.log(kp[0][1]),
                                      np.log(1 / kp[1][0]), np.log(kp[1][1])]])
        o1 = dense_reduced_loglik(y1, np.ones(5), exp_model(x1, th), corr(x1, [kp[0][0]]), kp[0][1])
        o2 = dense_reduced_loglik(y2, np.ones(4), sin_model(x2, th[1:]), corr(x2, [kp[1][0]]), kp[1][1])
        assert ms_loglik_no_bias(ms, params) == pytest.approx(o1 + o2, abs=1e-8)

    def test_index_routing_permutation(self):
        x, y = _data(4)

        def swapped(xx, theta):
            return exp_model(xx, theta[::-1])

        a = MultiSourceProblem([Source(x, y, exp_model, index_theta=[0, 1])], [[0, 5], [-2, 2]])
        b = MultiSourceProblem([Source(x, y, swapped, index_theta=[0, 1])], [[-2, 2], [0, 5]])
        c = MultiSourceProblem([Source(x, y, exp_model, index_theta=[1, 0])], [[-2, 2], [0, 5]])
        pa = np.array([1.5, 0.2, 0.4, -0.8])
        pb = np.array([0.2, 1.5, 0.4, -0.8])
        assert ms_loglik_no_bias(a, pa) == pytest.approx(ms_loglik_no_bias(b, pb), abs=1e-12)
        assert ms_loglik_no_bias(a, pa) == pytest.approx(ms_loglik_no_bias(c, pb), abs=1e-12)

    def test_wrong_length(self):
        x, y = _data(5)
        with pytest.raises(ValueError):
            ms_loglik_no_bias(_problem([y], x), [1.0, 0.0])

    def test_bias_rejected(self):
        x, y = _data(5)
        ms = _problem([y, y], x, measurement_bias=True, shared_design=x)
        with pytest.raises(ValueError):
            ms_loglik_no_bias(ms, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])


class TestValidation:
    def test_bad_index(self):
        x, y = _data(6)
        with pytest.raises(ValueError):
            MultiSourceProblem([Source(x, y, exp_model, index_theta=[0, 2])], [[0, 5], [-2, 2]])

    def test_bias_needs_shared_design(self):
        x, y = _data(6)
        with pytest.raises(ValueError):
            _problem([y], x, measurement_bias=True)
        with pytest.raises(ValueError):
            _problem([y], x, measurement_bias=True, shared_design=x + 1)


class TestStacking:
    def test_single_source_identity(self):
        x, y = _data(7)
        st = stack_sources(_problem([y], x))
        np.testing.assert_array_equal(st.stats.ybar, y)
        np.testing.assert_allclose(st.evaluate([1.0, 0.5]), exp_model(x, [1.0, 0.5]))

    def test_average(self):
        x = np.linspace(0, 1, 4)
        ms = MultiSourceProblem([Source(x, np.zeros(4), sin_model), Source(x, 2 * np.ones(4), sin_model)],
                                [[0, 3]])
        np.testing.assert_array_equal(stack_sources(ms, "none").stats.ybar, np.ones(4))

    def test_designs_must_match(self):
        x, y = _data(8)
        ms = MultiSourceProblem([Source(x, y, exp_model), Source(x[:-1], y[:-1], exp_model)], [[0, 5], [-2, 2]])
        with pytest.raises(ValueError):
            stack_sources(ms)


class TestSharedDelta:
    def test_dense_conditional(self):
        rng = np.random.default_rng(9)
        n = 4
        A = corr(np.linspace(0, 1, n), [0.5]) * 0.7
        covs = [np.diag(rng.uniform(0.1, 0.5, n)), corr(rng.random(n), [0.3]) * 0.2 + 0.1 * np.eye(n)]
        res = [rng.standard_normal(n), rng.standard_normal(n)]
        _, mean, cov = gibbs_shared_delta(res, covs, A, rng, return_moments=True)
        P = np.linalg.inv(A) + sum(np.linalg.inv(C) for C in covs)
        ref_cov = np.linalg.inv(P)
        ref_mean = ref_cov @ sum(np.linalg.inv(C) @ r for C, r in zip(covs, res))
        np.testing.assert_allclose(mean, ref_mean, atol=1e-10)
        np.testing.assert_allclose(cov, ref_cov, atol=1e-10)

    def test_huge_noise_reverts_to_prior(self):
        rng = np.random.default_rng(10)
        n = 3
        A = corr(np.linspace(0, 1, n), [0.4])
        covs = [1e10 * np.eye(n)]
        draws = np.array([gibbs_shared_delta([np.full(n, 5.0)], covs, A, rng) for _ in range(10000)])
        np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.05)
        np.testing.assert_allclose(np.cov(draws.T), A, atol=0.05)


def _as_ms_posterior(post: PosteriorSamples) -> MsPosterior:
    return MsPosterior(theta=post.theta, log_beta=[post.log_beta], log_eta=[post.log_eta],
                       sigma0_sq=[post.sigma0_sq], theta_m=[post.theta_m], delta=None, delta_log_beta=None,
                       delta_sigma_sq=None, accept_theta=post.accept_theta, n_iterations=post.n_iterations,
                       measurement_bias=False)


class TestSampler:
    @pytest.fixture(scope="class")
    @staticmethod
    def biased():
        rng = np.random.default_rng(11)
        sim = tb.multisource_simulate(n=15, k=2, rng=rng)
        x = sim["x"]
        sources = [Source(x, sim["observations"][l], tb.sin_model, discrepancy="gasp") for l in range(2)]
        P = MultiSourceProblem(sources, [[0, 6]], measurement_bias=True, shared_design=x, discrepancy="sgasp")
        return sim, P, ms_mcmc(P, McmcConfig(n_samples=400, burn_in=100, seed=3))

    def test_shapes_and_determinism(self, biased):
        sim, P, post = biased
        assert len(post) == 300
        assert post.delta.shape == (300, 15)
        again = ms_mcmc(P, McmcConfig(n_samples=400, burn_in=100, seed=3))
        np.testing.assert_array_equal(post.theta, again.theta)
        np.testing.assert_array_equal(post.delta, again.delta)
        assert np.all((post.theta >= 0) & (post.theta <= 6))

    def test_prediction_shapes(self, biased):
        sim, P, post = biased
        pred = ms_predict(post, P, max_draws=50)
        assert pred.reality.shape == (2, 15)
        assert pred.delta.shape == (15,)
        # reality rebuilds source means up to the source discrepancy and noise
        ybar = np.array([p.stats.ybar for p in P.problems])
        resid = ybar - pred.reality - pred.source_delta
        assert np.sqrt(np.mean(resid ** 2)) < 3 * np.std(sim["observations"])

    def test_csv(self, biased, tmp_path):
        _, _, post = biased
        path = tmp_path / "ms.csv"
        post.to_csv(path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[0] == "theta_1" and header[-1] == "delta_sigma_sq"
        assert "s2_sigma0_sq" in header and "delta_log_eta" in header

    def test_shared_variance_does_not_collapse(self, biased):
        # simulated delta variance is 0.04; an absorbing state at zero would pin the draws there
        _, _, post = biased
        assert np.quantile(post.delta_sigma_sq, 0.05) > 1e-3

    def test_single_source_prediction_matches(self):
        from gpcalib.mcmc import run_mcmc

        x, y = _data(12, n=8)
        single = CalibrationProblem(x, y, exp_model, [[0, 5], [-2, 2]], discrepancy="gasp")
        post = run_mcmc(single, McmcConfig(n_samples=300, burn_in=100, seed=0))
        ms = _problem([y], x)
        xs = np.linspace(0, 3, 6)
        a = ms_predict(_as_ms_posterior(post), ms, xs, max_draws=None)
        b = predict_posterior(post, single, xs)
        np.testing.assert_allclose(a.reality[0], b.mean, atol=1e-10)
        np.testing.assert_allclose(a.model[0], b.math_model_mean_no_trend, atol=1e-12)
