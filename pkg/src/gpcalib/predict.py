"""Prediction of the reality from point estimates or posterior draws.

Three predictors are reported at every test input:

``math_model_mean_no_trend``
    the calibrated computer model,
``math_model_mean``
    the computer model plus the trend,
``mean``
    the computer model plus the trend plus the discrepancy update.

Interval bounds are type-7 (linear interpolation) empirical quantiles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .kernels import cholesky_with_jitter, cross_corr
from .mcmc import PosteriorSamples
from .model import CalibrationProblem, NonFiniteModelError, discrepancy_matrix

__all__ = [
    "PredictionResult",
    "DrawPrediction",
    "conditional_prediction",
    "discrepancy_update",
    "predict_plugin",
    "predict_posterior",
    "interval_quantiles",
]


@dataclass
class PredictionResult:
    """Predictors at ``m`` test inputs.

    ``bounds`` has one row per requested probability in ``probs``.
    """

    x_test: np.ndarray
    math_model_mean_no_trend: np.ndarray
    math_model_mean: np.ndarray
    mean: np.ndarray
    probs: tuple | None = None
    bounds: np.ndarray | None = None
    interval_data: bool = False
    test_weights: np.ndarray | None = None
    n_draws: int = 1
    n_skipped: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def lower(self) -> np.ndarray | None:
        return None if self.bounds is None else self.bounds[0]

    @property
    def upper(self) -> np.ndarray | None:
        return None if self.bounds is None else self.bounds[-1]

    def header(self) -> list:
        cols = [f"x_{j + 1}" for j in range(self.x_test.shape[1])]
        cols += ["math_model_mean_no_trend", "math_model_mean", "mean"]
        if self.probs is not None:
            cols += [f"q_{p!r}" for p in self.probs]
        return cols

    def to_csv(self, path) -> None:
        """One row per test input; floats are written with ``repr``."""
        cols = [self.x_test[:, j] for j in range(self.x_test.shape[1])]
        cols += [self.math_model_mean_no_trend, self.math_model_mean, self.mean]
        if self.bounds is not None:
            cols += list(self.bounds)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])


@dataclass
class DrawPrediction:
    """Conditional predictive moments at one parameter value."""

    model: np.ndarray
    trend: np.ndarray
    delta: np.ndarray
    delta_var: np.ndarray
    noise_var: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.model + self.trend + self.delta


def interval_quantiles(draws, probs) -> np.ndarray:
    """Per-column type-7 quantiles of a ``(n_draws, m)`` matrix; one row per probability."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws.reshape(-1, 1)
    if draws.shape[0] == 0:
        raise ValueError("no draws to take quantiles from")
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    if np.any(probs <= 0) or np.any(probs >= 1) or np.any(np.diff(probs) < 0):
        raise ValueError("probabilities must be ascending and inside (0, 1)")
    return np.quantile(draws, probs, axis=0, method="linear")


def _as_test_design(problem, x_test):
    x = np.asarray(x_test, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if problem.p_x == 1 else x.reshape(1, -1)
    if x.shape[1] != problem.p_x:
        raise ValueError(f"test inputs need {problem.p_x} columns, got {x.shape[1]}")
    return x


def _test_trend(problem, X_testing, m, warn_list):
    if problem.q == 0:
        if X_testing is not None:
            warn_list.append("trend basis for test inputs ignored: the fit has no trend")
        return None
    if X_testing is None:
        raise ValueError("X_testing is required because the fit uses a trend")
    Hs = np.asarray(X_testing, dtype=float)
    if Hs.ndim == 1:
        Hs = Hs.reshape(-1, 1)
    if Hs.shape != (m, problem.q):
        raise ValueError(f"X_testing must have shape ({m}, {problem.q})")
    return Hs


def conditional_prediction(problem: CalibrationProblem, x_test, theta, theta_m, sigma0_sq,
                           gamma=None, eta=None, H_test=None, model=None,
                           test_weights=None) -> DrawPrediction:
    """Predictive moments of the reality given one parameter value.

    With ``R_t = M / eta + Lambda`` (``M`` is ``R`` or ``R_z``) and ``r`` the
    matching cross correlation, the discrepancy has mean
    ``r^T R_t^{-1} v / eta`` and variance ``sigma0^2 K* / eta`` with
    ``K* = K(x*, x*) - r^T R_t^{-1} r / eta``.
    """
    model = problem.model if model is None else model
    m = x_test.shape[0]
    theta = np.asarray(theta, dtype=float)
    f_test = np.asarray(model(x_test, theta), dtype=float).reshape(-1)
    if f_test.shape != (m,) or not np.all(np.isfinite(f_test)):
        raise NonFiniteModelError(f"computer model failed at test inputs for theta={theta}")
    trend = np.zeros(m) if H_test is None else H_test @ np.atleast_1d(theta_m)
    w = np.ones(m) if test_weights is None else np.asarray(test_weights, dtype=float)
    noise = sigma0_sq / w
    if not problem.has_kernel:
        return DrawPrediction(f_test, trend, np.zeros(m), np.zeros(m), noise)

    v = problem.stats.ybar - problem.evaluate(theta)
    if problem.q:
        v = v - problem.trend @ np.atleast_1d(theta_m)
    delta, kvar = discrepancy_update(problem, x_test, v, gamma, eta)
    return DrawPrediction(f_test, trend, delta, sigma0_sq * kvar, noise)


def discrepancy_update(problem: CalibrationProblem, x_test, v, gamma, eta):
    """Conditional mean of the discrepancy given residual ``v``, and ``K* / eta``.

    Uses the scaled kernel for S-GaSP problems.
    """
    m = x_test.shape[0]
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    dm = discrepancy_matrix(problem, gamma, eta)
    r = cross_corr(problem.design, x_test, problem.kernel, gamma).reshape(problem.n, m)
    kdiag = np.ones(m)
    if problem.discrepancy == "sgasp":
        # Scaled kernel: r_z = r - R A^{-1} r and K_z(x, x) = 1 - r^T A^{-1} r, A = R + n I / lambda_z.
        A = dm.R.R + problem.n / dm.lambda_z * np.eye(problem.n)
        chol_a, _ = cholesky_with_jitter(A)
        Air = linalg.cho_solve((chol_a, True), r, check_finite=False)
        kdiag = kdiag - np.sum(r * Air, axis=0)
        r = r - dm.R.R @ Air
    chol, _ = cholesky_with_jitter(dm.M / eta + np.diag(problem.stats.lam))
    alpha = linalg.cho_solve((chol, True), v, check_finite=False)
    Lr = linalg.solve_triangular(chol, r, lower=True, check_finite=False)
    kstar = np.maximum(kdiag - np.sum(Lr * Lr, axis=0) / eta, 0.0)
    return r.T @ alpha / eta, kstar / eta


def predict_plugin(fit, problem: CalibrationProblem, x_test, X_testing=None, model=None,
                   interval=None, interval_data: bool = False, test_weights=None) -> PredictionResult:
    """Plug-in predictive distribution at the MLE.

    The reality interval uses the discrepancy variance; ``interval_data`` adds
    the noise ``sigma0^2 / w*``.  The no-discrepancy model always reports the
    noise interval.
    """
    x = _as_test_design(problem, x_test)
    notes = []
    Hs = _test_trend(problem, X_testing, x.shape[0], notes)
    d = conditional_prediction(problem, x, fit.theta, fit.theta_m, fit.sigma0_sq, fit.gamma,
                               fit.eta, Hs, model, test_weights)
    res = PredictionResult(
        x_test=x,
        math_model_mean_no_trend=d.model,
        math_model_mean=d.model + d.trend,
        mean=d.mean,
        interval_data=interval_data,
        test_weights=test_weights,
        extra={"notes": notes},
    )
    if interval is not None:
        probs = np.atleast_1d(np.asarray(interval, dtype=float))
        var = d.delta_var + (d.noise_var if (interval_data or not problem.has_kernel) else 0.0)
        z = stats.norm.ppf(probs)
        res.probs = tuple(float(p) for p in probs)
        res.bounds = d.mean[None, :] + z[:, None] * np.sqrt(var)[None, :]
    return res


def predict_posterior(samples: PosteriorSamples, problem: CalibrationProblem, x_test, X_testing=None,
                      model=None, interval=None, interval_data: bool = False, test_weights=None,
                      seed=None, max_draws: int | None = None) -> PredictionResult:
    """Posterior-averaged predictors and Monte-Carlo predictive intervals.

    Every retained draw contributes its conditional mean; intervals come from
    one Gaussian predictive draw per retained draw.  For the no-discrepancy
    model the reality interval reflects parameter uncertainty only.  Draws at which the
    computer model fails are skipped and counted in ``n_skipped``.
    ``max_draws`` evenly subsamples long chains.
    """
    if len(samples) == 0:
        raise ValueError("no posterior draws")
    x = _as_test_design(problem, x_test)
    m = x.shape[0]
    notes = []
    Hs = _test_trend(problem, X_testing, m, notes)
    rng = np.random.default_rng(seed)
    idx = np.arange(len(samples))
    if max_draws is not None and len(idx) > max_draws:
        idx = np.unique(np.linspace(0, len(idx) - 1, max_draws).round().astype(int))
    theta = samples.theta
    lb, le = samples.log_beta, samples.log_eta
    s2 = samples.sigma0_sq
    tm = samples.theta_m
    sums = np.zeros((3, m))
    sim = [] if interval is not None else None
    skipped = 0
    for i in idx:
        gamma = None if lb is None else np.exp(-lb[i])
        eta = None if le is None else float(np.exp(le[i]))
        try:
            d = conditional_prediction(problem, x, theta[i], None if tm is None else tm[i], s2[i],
                                       gamma, eta, Hs, model, test_weights)
        except (NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError):
            skipped += 1
            continue
        sums[0] += d.model
        sums[1] += d.model + d.trend
        sums[2] += d.mean
        if sim is not None:
            var = d.delta_var + (d.noise_var if interval_data else 0.0)
            sim.append(d.mean + np.sqrt(var) * rng.standard_normal(m))
    used = len(idx) - skipped
    if used == 0:
        raise NonFiniteModelError("the computer model failed at every posterior draw")
    res = PredictionResult(
        x_test=x,
        math_model_mean_no_trend=sums[0] / used,
        math_model_mean=sums[1] / used,
        mean=sums[2] / used,
        interval_data=interval_data,
        test_weights=test_weights,
        n_draws=used,
        n_skipped=skipped,
        extra={"notes": notes},
    )
    if sim is not None:
        probs = np.atleast_1d(np.asarray(interval, dtype=float))
        res.probs = tuple(float(p) for p in probs)
        res.bounds = interval_quantiles(np.array(sim), probs)
    return res
