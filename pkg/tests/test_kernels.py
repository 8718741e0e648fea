"""Correlation functions, correlation matrices and the scaled kernel."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcalib.kernels import (
    FAMILIES,
    KernelSpec,
    SingularCorrelationError,
    cholesky_with_jitter,
    corr_derivatives,
    corr_matrix,
    cross_corr,
    kernel_eval,
    scaled_corr,
    scaled_cross,
)

M52 = KernelSpec("matern_5_2", 1)


def _dense_rz(R, lam):
    n = R.shape[0]
    return R - R @ np.linalg.inv(R + n / lam * np.eye(n)) @ R


class TestKernelEval:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_zero_displacement_is_one(self, family):
        spec = KernelSpec(family, 2, alpha=1.5)
        assert kernel_eval(spec, [0.3, 2.0], [0.0, 0.0]) == 1.0

    def test_matern52_at_one_range(self):
        s5 = np.sqrt(5.0)
        expected = (1 + s5 + 5 / 3) * np.exp(-s5)
        assert kernel_eval(M52, [0.7], [0.7]) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.5239941088, abs=1e-9)

    def test_pow_exp_alpha_two(self):
        spec = KernelSpec("pow_exp", 1, alpha=2.0)
        assert kernel_eval(spec, [1.3], [1.3]) == pytest.approx(np.exp(-1.0), rel=1e-14)

    def test_product_over_dimensions(self):
        spec = KernelSpec(("matern_5_2", "pow_exp"), 2, alpha=(1.9, 1.0))
        v = kernel_eval(spec, [1.0, 2.0], [0.5, 1.0])
        a = kernel_eval(KernelSpec("matern_5_2", 1), [1.0], [0.5])
        b = kernel_eval(KernelSpec("pow_exp", 1, alpha=1.0), [2.0], [1.0])
        assert v == pytest.approx(a * b, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_eval(M52, [1.0], [0.1, 0.2])

    def test_non_finite_displacement(self):
        with pytest.raises(ValueError):
            kernel_eval(M52, [1.0], [np.nan])

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec("pow_exp", 1, alpha=2.5)

    @given(
        d=st.floats(-50, 50, allow_nan=False),
        g=st.floats(1e-3, 1e3),
        family=st.sampled_from(FAMILIES),
    )
    def test_bounded_and_even(self, d, g, family):
        spec = KernelSpec(family, 1, alpha=1.9)
        v = kernel_eval(spec, [g], [d])
        assert 0.0 <= v <= 1.0
        assert v == kernel_eval(spec, [g], [-d])

    @pytest.mark.parametrize("family", ["matern_5_2", "matern_3_2"])
    def test_matern_nonincreasing(self, family):
        spec = KernelSpec(family, 1)
        vals = [kernel_eval(spec, [0.8], [d]) for d in np.linspace(0, 10, 400)]
        assert np.all(np.diff(vals) <= 0)


class TestCorrMatrix:
    def test_single_point(self):
        cm = corr_matrix([[0.4]], M52, [1.0])
        np.testing.assert_array_equal(cm.R, [[1.0]])

    def test_duplicate_rows_need_jitter(self):
        cm = corr_matrix([[0.5], [0.5]], M52, [1.0])
        np.testing.assert_array_equal(cm.R, np.ones((2, 2)))
        assert cm.jitter > 0
        np.testing.assert_allclose(cm.chol @ cm.chol.T, cm.R + cm.jitter * np.eye(2), atol=1e-14)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        x = rng.random(5)
        cm = corr_matrix(x, M52, [0.3])
        brute = np.array([[kernel_eval(M52, [0.3], [a - b]) for b in x] for a in x])
        np.testing.assert_allclose(cm.R, brute, atol=1e-14, rtol=0)

    def test_singular_after_ladder(self):
        bad = -np.eye(3)
        with pytest.raises(SingularCorrelationError):
            cholesky_with_jitter(bad)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), family=st.sampled_from(FAMILIES))
    def test_psd(self, seed, family):
        rng = np.random.default_rng(seed)
        x = rng.random((8, 2))
        spec = KernelSpec(family, 2, alpha=1.7)
        R = corr_matrix(x, spec, rng.uniform(0.1, 2.0, 2)).R
        v = rng.standard_normal((100, 8))
        assert np.all(np.einsum("ij,jk,ik->i", v, R, v) >= -1e-10)

    def test_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.random((6, 2))
        spec = KernelSpec(("matern_3_2", "pow_exp"), 2, alpha=(1.9, 1.5))
        g = np.array([0.4, 0.7])
        dR = corr_derivatives(x, spec, g)
        h = 1e-6
        for l in range(2):
            gp, gm = g.copy(), g.copy()
            gp[l] *= np.exp(h)
            gm[l] *= np.exp(-h)
            fd = (corr_matrix(x, spec, gp).R - corr_matrix(x, spec, gm).R) / (2 * h)
            np.testing.assert_allclose(dR[l], fd, atol=1e-8)


class TestCrossCorr:
    def test_design_point_gives_column(self):
        x = np.array([[0.1], [0.5], [0.9]])
        R = corr_matrix(x, M52, [0.4]).R
        np.testing.assert_allclose(cross_corr(x, x[1], M52, [0.4]), R[:, 1], atol=1e-15)

    def test_far_point_decays(self):
        x = np.linspace(0, 1, 5)
        r = cross_corr(x, [100.0], M52, [0.5])
        assert np.all(r < 1e-6)

    def test_empty_design(self):
        assert cross_corr(np.zeros((0, 1)), [0.3], M52, [1.0]).shape == (0,)

    def test_dimension_mismatch(self):
        spec = KernelSpec("matern_5_2", 2)
        with pytest.raises(ValueError):
            cross_corr(np.zeros((3, 2)), [0.1, 0.2, 0.3], spec, [1.0, 1.0])


class TestScaled:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.x = rng.random((4, 1))
        self.g = [0.5]
        self.R = corr_matrix(self.x, M52, self.g)

    def test_small_lambda_recovers_R(self):
        np.testing.assert_allclose(scaled_corr(self.R, 1e-12).Rz, self.R.R, atol=1e-8)

    def test_large_lambda_vanishes(self):
        assert np.max(np.abs(scaled_corr(self.R, 1e12).Rz)) < 1e-6

    def test_dense_oracle(self):
        np.testing.assert_allclose(scaled_corr(self.R, 1.0).Rz, _dense_rz(self.R.R, 1.0), atol=1e-10)

    def test_nonpositive_lambda(self):
        with pytest.raises(ValueError):
            scaled_corr(self.R, 0.0)
        with pytest.raises(ValueError):
            scaled_cross([0.1], [0.2], -1.0, self.x, M52, self.g)

    def test_cross_limits(self):
        xi = self.x[2]
        assert abs(scaled_cross(xi, xi, 1e12, self.x, M52, self.g)) < 1e-6
        plain = kernel_eval(M52, self.g, [0.13 - 0.71])
        assert scaled_cross([0.13], [0.71], 1e-12, self.x, M52, self.g) == pytest.approx(plain, abs=1e-8)

    def test_cross_off_design_oracle(self):
        a, b = np.array([0.13]), np.array([0.71])
        n = 4
        ra = np.array([kernel_eval(M52, self.g, a - xi) for xi in self.x])
        rb = np.array([kernel_eval(M52, self.g, b - xi) for xi in self.x])
        oracle = kernel_eval(M52, self.g, a - b) - ra @ np.linalg.inv(self.R.R + n * np.eye(n)) @ rb
        assert scaled_cross(a, b, 1.0, self.x, M52, self.g) == pytest.approx(oracle, abs=1e-10)

    def test_cross_at_design_matches_matrix(self):
        Rz = scaled_corr(self.R, 2.5).Rz
        full = scaled_cross(self.x, self.x, 2.5, self.x, M52, self.g)
        np.testing.assert_allclose(full, Rz, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), log_lam=st.floats(-6, 6))
    def test_scaling_inequality(self, seed, log_lam):
        rng = np.random.default_rng(seed)
        x = rng.random((6, 1))
        R = corr_matrix(x, M52, [rng.uniform(0.05, 1.0)])
        Rz = scaled_corr(R, 10.0 ** log_lam).Rz
        v = rng.standard_normal(6)
        assert v @ Rz @ v <= v @ R.R @ v + 1e-10
