"""Calibration problems and their likelihoods.

Three models of the field data are supported:

* ``'no-discrepancy'``:  ``y = f(x, theta) + h(x) theta_m + eps``
* ``'gasp'``:  a Gaussian-process discrepancy with a product kernel
* ``'sgasp'``: the discrepancy with the scaled kernel, which puts more prior
  mass on a small mean-squared discrepancy at the design.

Replicated observations are always reduced to their sufficient statistics
(averages, counts and the within-input sum of squares), so a vector of
observations is just the case where every count equals one.

Kernel parameters are handled in the coordinates used by the optimizer and
the sampler: ``log_beta = -log(gamma)`` and ``log_eta``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .kernels import (
    CorrelationMatrix,
    KernelSpec,
    cholesky_with_jitter,
    corr_derivatives,
    corr_matrix,
    scaled_corr,
)

__all__ = [
    "DISCREPANCY_TYPES",
    "CalibrationProblem",
    "ReplicateStats",
    "ProfileWorkspace",
    "DegenerateLikelihoodWarning",
    "NonFiniteModelError",
    "normalize_discrepancy",
    "replicate_stats",
    "trend_lse",
    "no_disc_profile_loglik",
    "build_workspace",
    "gasp_trend_sigma_mle",
    "gasp_profile_loglik",
    "sgasp_profile_loglik",
    "replicate_profile_loglik",
    "default_lambda_z",
    "discrepancy_matrix",
    "profile_loglik",
    "profile_grad",
    "split_params",
]

DISCREPANCY_TYPES = ("no-discrepancy", "gasp", "sgasp")

_ALIASES = {
    "no-discrepancy": "no-discrepancy",
    "no_discrepancy": "no-discrepancy",
    "none": "no-discrepancy",
    "gasp": "gasp",
    "s-gasp": "sgasp",
    "sgasp": "sgasp",
    "s_gasp": "sgasp",
}

# Smallest sum of squares fed to a log; keeps a perfect fit finite.
_TINY_SS = 1e-300


class DegenerateLikelihoodWarning(RuntimeWarning):
    """Residual sum of squares is zero (perfect fit); the log-likelihood was guarded."""


class NonFiniteModelError(FloatingPointError):
    """The computer model returned NaN or inf."""


def normalize_discrepancy(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except (KeyError, AttributeError):
        raise ValueError(f"unknown discrepancy type {name!r}; choose from {DISCREPANCY_TYPES}") from None


@dataclass
class ReplicateStats:
    """Sufficient statistics of replicated field observations.

    ``lam`` holds the diagonal of the effective noise matrix, ``1 / (w_i k_i)``.
    """

    ybar: np.ndarray
    counts: np.ndarray
    sf2: float
    lam: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.ybar.shape[0]

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())


def replicate_stats(observations, weights=None) -> ReplicateStats:
    """Reduce field observations to replicate sufficient statistics.

    ``observations`` is an ``n`` vector, an ``n x k`` matrix (balanced
    replicates, one row per input) or a length-``n`` sequence of 1-d arrays
    (ragged replicates).
    """
    if isinstance(observations, np.ndarray) and observations.dtype != object:
        obs = np.asarray(observations, dtype=float)
        if obs.ndim == 1:
            groups = [obs[i : i + 1] for i in range(obs.shape[0])]
        elif obs.ndim == 2:
            groups = [obs[i] for i in range(obs.shape[0])]
        else:
            raise ValueError("observations must be a vector, a matrix or a list of vectors")
    else:
        groups = [np.atleast_1d(np.asarray(g, dtype=float)) for g in observations]
    if len(groups) == 0:
        raise ValueError("no observations given")
    for i, g in enumerate(groups):
        if g.size == 0:
            raise ValueError(f"input {i} has an empty replicate list")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"input {i} has non-finite observations")
    n = len(groups)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (n,):
        raise ValueError(f"expected {n} output weights, got {w.shape[0]}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("output weights must be positive")
    counts = np.array([g.size for g in groups], dtype=int)
    ybar = np.array([g.mean() for g in groups])
    sf2 = float(sum(w[i] * np.sum((groups[i] - ybar[i]) ** 2) for i in range(n)))
    return ReplicateStats(ybar=ybar, counts=counts, sf2=sf2, lam=1.0 / (w * counts), weights=w)


@dataclass
class CalibrationProblem:
    """Field data, computer model and modelling choices for one calibration.

    Parameters
    ----------
    design : array, shape (n, p_x)
        Observable inputs; a 1-d array is read as a single input column.
    observations : array or list
        ``n`` vector, ``n x k`` replicate matrix or ragged list of replicates.
    model : callable
        ``model(design, theta) -> (n,) array``, the computer model evaluated
        at every design row.
    theta_range : array, shape (p_theta, 2)
        Lower and upper bound of every calibration parameter.
    trend : array, shape (n, q), optional
        Mean basis ``H``; absent means a zero trend.
    output_weights : array, shape (n,), optional
        Inverse noise scale ``w_i`` per input; defaults to one.
    discrepancy : str
        ``'no-discrepancy'``, ``'gasp'`` or ``'sgasp'``.
    kernel : KernelSpec, optional
        Defaults to a Matern 5/2 product kernel.
    lambda_z : float, optional
        Fixed S-GaSP scale; ``None`` recomputes the default from the
        current range and nugget parameters.
    model_jacobian : callable, optional
        ``model_jacobian(design, theta) -> (n, p_theta)``; central
        differences are used when absent.
    """

    design: np.ndarray
    observations: object
    model: Callable[[np.ndarray, np.ndarray], np.ndarray]
    theta_range: np.ndarray
    trend: np.ndarray | None = None
    output_weights: np.ndarray | None = None
    discrepancy: str = "sgasp"
    kernel: KernelSpec | None = None
    lambda_z: float | None = None
    model_jacobian: Callable | None = None
    stats: ReplicateStats = field(init=False, repr=False)

    def __post_init__(self):
        design = np.asarray(self.design, dtype=float)
        if design.ndim == 1:
            design = design.reshape(-1, 1)
        if design.ndim != 2 or design.shape[0] < 1:
            raise ValueError("design must be an (n, p_x) array with n >= 1")
        self.design = design
        tr = np.atleast_2d(np.asarray(self.theta_range, dtype=float))
        if tr.ndim != 2 or tr.shape[1] != 2:
            raise ValueError("theta_range must have shape (p_theta, 2)")
        if np.any(tr[:, 0] >= tr[:, 1]):
            raise ValueError("every theta_range row needs lower < upper")
        self.theta_range = tr
        self.discrepancy = normalize_discrepancy(self.discrepancy)
        self.stats = replicate_stats(self.observations, self.output_weights)
        if self.stats.n != design.shape[0]:
            raise ValueError(
                f"{self.stats.n} observation groups for {design.shape[0]} design rows"
            )
        if self.trend is not None:
            H = np.asarray(self.trend, dtype=float)
            if H.ndim == 1:
                H = H.reshape(-1, 1)
            if H.shape[0] != design.shape[0]:
                raise ValueError("trend basis must have one row per design row")
            if H.shape[1] >= design.shape[0] or np.linalg.matrix_rank(H) < H.shape[1]:
                raise ValueError("trend basis must have full column rank q < n")
            self.trend = H
        if self.kernel is None:
            self.kernel = KernelSpec("matern_5_2", dim=design.shape[1])
        elif self.kernel.dim != design.shape[1]:
            raise ValueError("kernel dimension does not match the design")
        if self.lambda_z is not None and self.lambda_z <= 0:
            raise ValueError("lambda_z must be positive")

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p_x(self) -> int:
        return self.design.shape[1]

    @property
    def p_theta(self) -> int:
        return self.theta_range.shape[0]

    @property
    def q(self) -> int:
        return 0 if self.trend is None else self.trend.shape[1]

    @property
    def domain_lengths(self) -> np.ndarray:
        return np.ptp(self.design, axis=0)

    @property
    def has_kernel(self) -> bool:
        return self.discrepancy != "no-discrepancy"

    def with_model(self, model, model_jacobian=None) -> "CalibrationProblem":
        return replace(self, model=model, model_jacobian=model_jacobian)

    def evaluate(self, theta) -> np.ndarray:
        f = np.asarray(self.model(self.design, np.asarray(theta, dtype=float)), dtype=float).reshape(-1)
        if f.shape != (self.n,):
            raise ValueError(f"computer model returned shape {f.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(f)):
            raise NonFiniteModelError(f"computer model is not finite at theta={theta}")
        return f

    def jacobian(self, theta) -> np.ndarray:
        """``d f / d theta`` as an ``(n, p_theta)`` array."""
        theta = np.asarray(theta, dtype=float)
        if self.model_jacobian is not None:
            J = np.asarray(self.model_jacobian(self.design, theta), dtype=float)
            return J.reshape(self.n, self.p_theta)
        steps = 1e-4 * (self.theta_range[:, 1] - self.theta_range[:, 0])
        J = np.empty((self.n, self.p_theta))
        for i in range(self.p_theta):
            e = np.zeros(self.p_theta)
            e[i] = steps[i]
            J[:, i] = (self.evaluate(theta + e) - self.evaluate(theta - e)) / (2 * steps[i])
        return J


def trend_lse(H, weights, residual) -> np.ndarray:
    """Weighted least squares ``(H^T W H)^{-1} H^T W r`` with ``W = diag(weights)``."""
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H.reshape(-1, 1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    r = np.asarray(residual, dtype=float).reshape(-1)
    A = H.T @ (w[:, None] * H)
    if np.linalg.matrix_rank(A) < H.shape[1]:
        raise np.linalg.LinAlgError("trend basis is rank deficient")
    return linalg.solve(A, H.T @ (w * r), assume_a="pos")


def _guarded_log(ss: float) -> float:
    if ss <= _TINY_SS:
        warnings.warn("zero residual sum of squares", DegenerateLikelihoodWarning, stacklevel=3)
        return float(np.log(_TINY_SS))
    return float(np.log(ss))


def no_disc_profile_loglik(problem: CalibrationProblem, theta, theta_m=None) -> float:
    """``-(N/2) log(sum_i w_i k_i (ybar_i - f_i - h_i theta_m)^2 + S_f^2)``.

    ``theta_m=None`` profiles the trend by weighted least squares.
    """
    st = problem.stats
    r = st.ybar - problem.evaluate(theta)
    wk = 1.0 / st.lam
    if problem.trend is not None:
        if theta_m is None:
            theta_m = trend_lse(problem.trend, wk, r)
        r = r - problem.trend @ np.atleast_1d(theta_m)
    ss = float(np.sum(wk * r * r)) + st.sf2
    return -0.5 * st.n_total * _guarded_log(ss)


@dataclass
class ProfileWorkspace:
    """Factorized ``R_tilde = M / eta + Lambda`` and the profiled residual quantities.

    ``alpha`` is ``Q (ybar - f)`` which equals ``R_tilde^{-1} v`` with ``v`` the
    residual after removing the fitted trend.
    """

    Rt: np.ndarray
    chol: np.ndarray
    jitter: float
    v: np.ndarray
    alpha: np.ndarray
    s2: float
    theta_m: np.ndarray | None
    H: np.ndarray | None
    sf2: float
    n_total: int

    def solve(self, b):
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def Q(self) -> np.ndarray:
        Ri = self.solve(np.eye(self.Rt.shape[0]))
        if self.H is None:
            return Ri
        RiH = Ri @ self.H
        return Ri - RiH @ linalg.solve(self.H.T @ RiH, RiH.T, assume_a="pos")


def build_workspace(ybar, lam, f, M, eta, H=None, sf2=0.0, n_total=None) -> ProfileWorkspace:
    """Factor ``R_tilde`` and profile the trend by generalized least squares.

    ``M`` is the discrepancy correlation (``R`` or ``R_z``) or ``None`` for the
    no-discrepancy model, in which case ``R_tilde = Lambda``.
    """
    lam = np.asarray(lam, dtype=float)
    Rt = np.diag(lam) if M is None else M / eta + np.diag(lam)
    chol, jitter = cholesky_with_jitter(Rt)
    y0 = np.asarray(ybar, dtype=float) - f
    theta_m = None
    v = y0
    if H is not None:
        RiH = linalg.cho_solve((chol, True), H, check_finite=False)
        A = H.T @ RiH
        theta_m = linalg.solve(A, RiH.T @ y0, assume_a="pos")
        v = y0 - H @ theta_m
    alpha = linalg.cho_solve((chol, True), v, check_finite=False)
    s2 = float(v @ alpha)
    return ProfileWorkspace(
        Rt=Rt, chol=chol, jitter=jitter, v=v, alpha=alpha, s2=max(s2, 0.0),
        theta_m=theta_m, H=H, sf2=float(sf2), n_total=len(y0) if n_total is None else int(n_total),
    )


def gasp_trend_sigma_mle(ws: ProfileWorkspace):
    """Generalized least-squares trend and ``sigma0^2 = (S_K^2 + S_f^2) / N``."""
    return ws.theta_m, (ws.s2 + ws.sf2) / ws.n_total


def default_lambda_z(gamma, eta: float, n: int, domain_lengths) -> float:
    """Default S-GaSP scale ``(lambda * ||gamma / L||)^{-1/2}`` with ``lambda = eta / n``."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    L = np.atleast_1d(np.asarray(domain_lengths, dtype=float))
    if np.any(L <= 0):
        raise ValueError("domain lengths must be positive for the default lambda_z")
    if eta <= 0 or np.any(gamma <= 0):
        raise ValueError("gamma and eta must be positive")
    lam = eta / n
    return float((lam * np.linalg.norm(gamma / L)) ** -0.5)


@dataclass
class DiscrepancyMatrix:
    """Correlation of the discrepancy at the design and its log-coordinate derivatives."""

    M: np.ndarray
    R: CorrelationMatrix
    lambda_z: float | None = None
    dM_dlog_beta: list | None = None
    dM_dlog_eta: np.ndarray | None = None


def discrepancy_matrix(problem: CalibrationProblem, gamma, eta: float, with_grad: bool = False,
                       design=None, lambda_z=None) -> DiscrepancyMatrix:
    """``R`` for GaSP or ``R_z`` for S-GaSP, optionally with derivatives.

    Derivatives are taken with respect to ``log_beta_l`` and ``log_eta``.  When
    ``lambda_z`` is automatic its dependence on ``gamma`` and ``eta`` is included.
    """
    x = problem.design if design is None else design
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    R = corr_matrix(x, problem.kernel, gamma)
    dR = None
    if with_grad:
        dR = [-d for d in corr_derivatives(x, problem.kernel, gamma, R.R)]
    if problem.discrepancy == "gasp":
        dm_eta = np.zeros_like(R.R) if with_grad else None
        return DiscrepancyMatrix(M=R.R, R=R, dM_dlog_beta=dR, dM_dlog_eta=dm_eta)
    if problem.discrepancy != "sgasp":
        raise ValueError("no-discrepancy model has no discrepancy correlation")
    n = x.shape[0]
    fixed = lambda_z if lambda_z is not None else problem.lambda_z
    auto = fixed is None
    lz = default_lambda_z(gamma, eta, n, problem.domain_lengths) if auto else float(fixed)
    sc = scaled_corr(R, lz)
    out = DiscrepancyMatrix(M=sc.Rz, R=R, lambda_z=lz)
    if with_grad:
        c = sc.shift
        B = c * sc.solve_shifted(np.eye(n))
        B = 0.5 * (B + B.T)
        IB2 = (np.eye(n) - B) @ (np.eye(n) - B)
        dM = [B @ d @ B for d in dR]
        dm_eta = np.zeros((n, n))
        if auto:
            # log c = 0.5 log(n eta) + 0.25 log(sum (gamma_l / L_l)^2)
            gt2 = (gamma / problem.domain_lengths) ** 2
            dlogc_dlogbeta = -0.5 * gt2 / gt2.sum()
            for l in range(len(dM)):
                dM[l] = dM[l] + c * dlogc_dlogbeta[l] * IB2
            dm_eta = 0.5 * c * IB2
        out.dM_dlog_beta = dM
        out.dM_dlog_eta = dm_eta
    return out


def replicate_profile_loglik(stats: ReplicateStats, f, M, eta, H=None, normalized=False) -> float:
    """Profile log-likelihood from replicate sufficient statistics.

    Returns ``-0.5 log|M/eta + Lambda_tilde| - (N/2) log(S_K^2 + S_f^2)``.  With
    ``normalized=True`` the value is the maximized Gaussian log-density of all
    ``N`` raw observations, which is what a dense ``N x N`` computation gives.
    """
    ws = build_workspace(stats.ybar, stats.lam, f, M, eta, H=H, sf2=stats.sf2, n_total=stats.n_total)
    N = stats.n_total
    ss = ws.s2 + ws.sf2
    val = (-0.5 * ws.logdet if M is not None else 0.0) - 0.5 * N * _guarded_log(ss)
    if not normalized:
        return val
    if M is None:
        val -= 0.5 * float(np.sum(np.log(stats.lam)))
    # log|Sigma_full| = log|R_tt| + sum_i (k_i - 1) log(1/w_i) + log k_i
    k = stats.counts
    w = stats.weights
    log_det_extra = float(np.sum(-(k - 1) * np.log(w) + np.log(k)))
    return val - 0.5 * log_det_extra - 0.5 * N * np.log(2 * np.pi / N) - 0.5 * N


def gasp_profile_loglik(problem: CalibrationProblem, theta, gamma, eta) -> float:
    """Profile log-likelihood of the GaSP model, ``-0.5 log|R_t| - (N/2) log S^2``."""
    p = replace(problem, discrepancy="gasp") if problem.discrepancy != "gasp" else problem
    dm = discrepancy_matrix(p, gamma, eta)
    return replicate_profile_loglik(problem.stats, problem.evaluate(theta), dm.M, eta, H=problem.trend)


def sgasp_profile_loglik(problem: CalibrationProblem, theta, gamma, eta, lambda_z=None) -> float:
    """Profile log-likelihood with the scaled correlation ``R_z`` in place of ``R``."""
    p = replace(problem, discrepancy="sgasp") if problem.discrepancy != "sgasp" else problem
    dm = discrepancy_matrix(p, gamma, eta, lambda_z=lambda_z)
    return replicate_profile_loglik(problem.stats, problem.evaluate(theta), dm.M, eta, H=problem.trend)


def split_params(problem: CalibrationProblem, params):
    """Split an optimizer vector ``(theta, log_beta, log_eta)`` into ``(theta, gamma, eta)``."""
    params = np.asarray(params, dtype=float)
    pt = problem.p_theta
    theta = params[:pt]
    if not problem.has_kernel:
        return theta, None, None
    log_beta = params[pt : pt + problem.p_x]
    return theta, np.exp(-log_beta), float(np.exp(params[pt + problem.p_x]))


def profile_loglik(problem: CalibrationProblem, params) -> float:
    """Profile log-likelihood at ``(theta, log_beta, log_eta)`` for the problem's model."""
    theta, gamma, eta = split_params(problem, params)
    if not problem.has_kernel:
        return no_disc_profile_loglik(problem, theta)
    dm = discrepancy_matrix(problem, gamma, eta)
    return replicate_profile_loglik(problem.stats, problem.evaluate(theta), dm.M, eta, H=problem.trend)


def profile_grad(problem: CalibrationProblem, theta, gamma=None, eta=None, return_value=False):
    """Analytic gradient of the profile log-likelihood.

    The gradient is with respect to ``(theta, log_beta, log_eta)``; for the
    no-discrepancy model only the ``theta`` block is present.  Derivatives of
    the computer model come from ``problem.jacobian``.
    """
    st = problem.stats
    theta = np.asarray(theta, dtype=float)
    f = problem.evaluate(theta)
    J = problem.jacobian(theta)
    N = st.n_total
    if not problem.has_kernel:
        ws = build_workspace(st.ybar, st.lam, f, None, 1.0, H=problem.trend, sf2=st.sf2, n_total=N)
        ss = max(ws.s2 + ws.sf2, _TINY_SS)
        grad = N * (J.T @ ws.alpha) / ss
        if return_value:
            return grad, -0.5 * N * _guarded_log(ws.s2 + ws.sf2)
        return grad
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    dm = discrepancy_matrix(problem, gamma, eta, with_grad=True)
    ws = build_workspace(st.ybar, st.lam, f, dm.M, eta, H=problem.trend, sf2=st.sf2, n_total=N)
    ss = max(ws.s2 + ws.sf2, _TINY_SS)
    Ri = ws.solve(np.eye(problem.n))
    a = ws.alpha

    def dl(dRt):
        return -0.5 * float(np.sum(Ri * dRt)) + 0.5 * N * float(a @ dRt @ a) / ss

    g_theta = N * (J.T @ a) / ss
    g_beta = [dl(d / eta) for d in dm.dM_dlog_beta]
    g_eta = dl(-dm.M / eta + dm.dM_dlog_eta / eta)
    grad = np.concatenate([g_theta, g_beta, [g_eta]])
    if return_value:
        return grad, -0.5 * ws.logdet - 0.5 * N * _guarded_log(ws.s2 + ws.sf2)
    return grad
