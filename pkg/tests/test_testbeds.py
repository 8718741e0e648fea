"""Simulators, integrator, designs and synthetic data."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcalib import testbeds as tb


class TestBayarri:
    def test_zero_input(self):
        np.testing.assert_array_equal(tb.bayarri07([0.0, 0.0], [13.0]), [5.0, 5.0])

    def test_truth_minus_model(self):
        x = np.linspace(0, 3, 11)
        diff = tb.bayarri07_truth(x) - tb.bayarri07(x, [1.7])
        np.testing.assert_allclose(diff, 1.5 - 1.5 * np.exp(-1.7 * x), atol=1e-14)

    def test_data(self):
        assert tb.BAYARRI07_INPUT[0] == 0.110 and tb.BAYARRI07_INPUT[1] == 0.432
        assert tb.BAYARRI07_INPUT[-1] == 3.010
        np.testing.assert_array_equal(tb.BAYARRI07_OUTPUT[0], [4.730, 4.720, 4.234])

    def test_jacobian(self):
        x = np.linspace(0, 3, 5)
        h = 1e-6
        fd = (tb.bayarri07(x, [2.0 + h]) - tb.bayarri07(x, [2.0 - h])) / (2 * h)
        np.testing.assert_allclose(tb.bayarri07_jacobian(x, [2.0])[:, 0], fd, atol=1e-7)


def _decay(t, y, params):
    return -y


class TestRk4:
    def test_one_step(self):
        sys = tb.OdeSystem(_decay, np.array([1.0]), np.array([0.05]))
        assert tb.rk4_solve(sys, 0.05)[0, 0] == pytest.approx(0.9512294, abs=1e-7)
        assert tb.rk4_solve(sys, 0.05)[0, 0] == pytest.approx(np.exp(-0.05), abs=1e-8)

    def test_zero_rhs(self):
        sys = tb.OdeSystem(lambda t, y, p: np.zeros_like(y), np.array([2.0, -1.0]), np.linspace(0.5, 3, 6))
        np.testing.assert_array_equal(tb.rk4_solve(sys, 0.1), np.tile([2.0, -1.0], (6, 1)))

    def test_order_four(self):
        sys = tb.OdeSystem(_decay, np.array([1.0]), np.array([2.0]))
        errs = [abs(tb.rk4_solve(sys, h)[0, 0] - np.exp(-2.0)) for h in (0.2, 0.1, 0.05)]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        np.testing.assert_allclose(ratios, 16.0, rtol=0.1)

    def test_blow_up(self):
        sys = tb.OdeSystem(lambda t, y, p: y * y, np.array([1.0]), np.array([0.5, 2.0]))
        with pytest.raises(tb.OdeBlowUpError) as info:
            tb.rk4_solve(sys, 0.01)
        assert info.value.trajectory.shape[0] == 1

    def test_bad_step_and_times(self):
        sys = tb.OdeSystem(_decay, np.array([1.0]), np.array([1.0, 0.5]))
        with pytest.raises(ValueError):
            tb.rk4_solve(sys, 0.0)
        with pytest.raises(ValueError):
            tb.rk4_solve(sys, 0.1)


class TestBox:
    @pytest.mark.parametrize("theta", [(1.0, 1.2), (0.6, 1.4), (1.5, 0.5)])
    def test_matches_analytic(self, theta):
        num = tb.box_model(tb.BOX_TIMES, *theta, step=1.0)
        np.testing.assert_allclose(num, tb.box_analytic(tb.BOX_TIMES, *theta), atol=1e-6)

    def test_resonance(self):
        num = tb.box_model(tb.BOX_TIMES, 1.1, 1.1)
        np.testing.assert_allclose(num, tb.box_analytic(tb.BOX_TIMES, 1.1, 1.1), atol=1e-6)

    def test_time_zero(self):
        assert tb.box_model([0.0], 1.0, 1.0)[0] == 0.0

    def test_unsorted_times(self):
        t = np.array([40.0, 10.0, 320.0])
        np.testing.assert_allclose(tb.box_model(t, 1.0, 1.3), tb.box_analytic(t, 1.0, 1.3), atol=1e-6)

    def test_data(self):
        assert tb.BOX_OUTPUT.shape == (6, 2)
        np.testing.assert_array_equal(tb.BOX_OUTPUT[0], [19.2, 42.1])
        assert tb.BOX_OUTPUT[1, 0] == 14

    def test_wrapper_counts(self):
        m = tb.BoxModel()
        m(tb.BOX_TIMES, [1.0, 1.0])
        m(tb.BOX_TIMES, [1.0, 1.1])
        assert m.calls == 2


def _naive_rhs(x, force):
    k = x.shape[0]
    return np.array([(x[(j + 1) % k] - x[(j - 2) % k]) * x[(j - 1) % k] - x[j] + force for j in range(k)])


class TestLorenz:
    def test_equilibrium(self):
        x0 = np.full(40, 8.0)
        _, states = tb.lorenz96_simulate(8.0, x0, n_times=10)
        np.testing.assert_allclose(states, 8.0, atol=1e-12)

    def test_index_wrap(self):
        x = np.random.default_rng(0).standard_normal(7)
        np.testing.assert_allclose(tb.lorenz96_rhs(0.0, x, 3.0), _naive_rhs(x, 3.0), atol=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), shift=st.integers(0, 39))
    def test_rotation(self, seed, shift):
        x = np.random.default_rng(seed).standard_normal(40)
        np.testing.assert_allclose(tb.lorenz96_rhs(0.0, np.roll(x, shift), 8.0),
                                   np.roll(tb.lorenz96_rhs(0.0, x, 8.0), shift), atol=1e-12)

    def test_grid(self):
        times, states = tb.lorenz96_simulate(8.0, np.ones(40), n_times=40, h=0.05)
        np.testing.assert_allclose(times, 0.05 * np.arange(1, 41))
        assert states.shape == (40, 40)

    def test_scenario_one(self):
        sc = tb.lorenz96_scenario(1, rng=1)
        assert sc["design"].shape == (80, 2)
        np.testing.assert_allclose(np.unique(sc["design"][:, 0]), sc["times"])
        assert np.all(np.bincount(np.rint(sc["design"][:, 0] / 0.05).astype(int))[1:] == 2)
        model = tb.Lorenz96Model(sc["x0"], sc["h"])
        f = model(sc["design"], [8.0])
        resid = sc["observations"] - f
        assert abs(resid.mean()) < 0.4 and 0.7 < resid.std() < 1.3

    def test_scenario_two_bias(self):
        a = tb.lorenz96_scenario(1, rng=3)
        b = tb.lorenz96_scenario(2, rng=3)
        j = np.arange(1, 41)
        bias = 2.0 * b["times"][:, None] * np.sin(2 * np.pi * j[None, :] / 40)
        np.testing.assert_allclose(b["reality"] - a["reality"], bias, atol=1e-12)
        np.testing.assert_array_equal(a["states"], b["states"])

    def test_bad_scenario(self):
        with pytest.raises(ValueError):
            tb.lorenz96_scenario(3)

    def test_deterministic(self):
        a = tb.lorenz96_scenario(2, rng=5)
        b = tb.lorenz96_scenario(2, rng=5)
        for key in ("x0", "design", "observations"):
            np.testing.assert_array_equal(a[key], b[key])


class TestLhs:
    @settings(max_examples=30, deadline=None)
    @given(D=st.integers(1, 30), p=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_strata(self, D, p, seed):
        pts = tb.maximin_lhs(D, p, seed, n_candidates=5)
        assert pts.shape == (D, p)
        for j in range(p):
            np.testing.assert_array_equal(np.sort(np.floor(pts[:, j] * D)), np.arange(D))

    def test_two_points(self):
        pts = tb.maximin_lhs(2, 1, 0)
        assert {int(v >= 0.5) for v in pts[:, 0]} == {0, 1}

    def test_maximin_improves(self):
        def dmin(pts):
            d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
            return d[np.triu_indices(len(pts), 1)].min()

        wins = sum(dmin(tb.maximin_lhs(10, 2, s)) >= dmin(tb.maximin_lhs(10, 2, s + 1000, n_candidates=1))
                   for s in range(40))
        assert wins >= 38

    def test_deterministic(self):
        np.testing.assert_array_equal(tb.maximin_lhs(8, 3, 7), tb.maximin_lhs(8, 3, 7))


class TestMultisourceData:
    def test_shapes_and_identity(self):
        sim = tb.multisource_simulate(rng=0)
        assert sim["observations"].shape == (5, 100)
        np.testing.assert_array_equal(sim["reality"], np.sin(np.pi * sim["x"]) + sim["delta"])
        np.testing.assert_allclose(sim["bias_var"], [0.5, 0.625, 0.75, 0.875, 1.0])

    def test_delta_variance(self):
        draws = np.array([tb.multisource_simulate(n=20, k=1, rng=s)["delta"] for s in range(400)])
        assert draws.var() == pytest.approx(0.04, rel=0.15)

    def test_deterministic(self):
        a = tb.multisource_simulate(n=30, k=2, rng=9)
        b = tb.multisource_simulate(n=30, k=2, rng=9)
        np.testing.assert_array_equal(a["observations"], b["observations"])
