"""Metropolis-within-Gibbs posterior sampling for single-source calibration.

One iteration updates, in order,

1. the calibration parameters as one Metropolis block (uniform prior on
   ``theta_range``, Gaussian random-walk proposal),
2. for GaSP / S-GaSP, ``(log_beta, log_eta)`` as one Metropolis block under the
   jointly robust prior,
3. the noise variance ``sigma0^2`` from its inverse-Gamma full conditional,
4. the trend coefficients from their Gaussian full conditional.

Gamma variates use the shape-rate convention throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .kernels import cholesky_with_jitter
from .model import (
    CalibrationProblem,
    NonFiniteModelError,
    discrepancy_matrix,
    no_disc_profile_loglik,
)

__all__ = [
    "JrPriorParams",
    "McmcConfig",
    "PosteriorSamples",
    "jr_log_prior",
    "gibbs_sigma0",
    "gibbs_trend",
    "metropolis_theta_block",
    "metropolis_range_nugget",
    "run_mcmc",
    "initial_theta",
    "default_kernel_start",
]


@dataclass
class JrPriorParams:
    """Jointly robust prior ``t^a exp(-b t)`` with ``t = sum_l C_l beta_l + eta``."""

    a: float
    b: float
    C: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_1d(np.asarray(self.C, dtype=float))
        if self.b <= 0 or np.any(self.C <= 0):
            raise ValueError("JR prior needs b > 0 and C_l > 0")

    @classmethod
    def default(cls, design, a=None, b=1.0) -> "JrPriorParams":
        x = np.asarray(design, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n, p = x.shape
        span = np.ptp(x, axis=0)
        span = np.where(span > 0, span, 1.0)
        return cls(a=0.5 - p if a is None else a, b=b, C=n ** (-1.0 / p) * span)


def jr_log_prior(beta, eta, params: JrPriorParams, log_coords: bool = False) -> float:
    """Log JR prior density up to a constant.

    With ``log_coords=True`` the density is that of ``(log_beta, log_eta)``,
    i.e. it includes the Jacobian ``prod(beta) * eta``.  ``eta=None`` drops the
    nugget term (a correlation without nugget).
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    t = float(params.C @ beta) + (0.0 if eta is None else float(eta))
    if not np.isfinite(t):
        return -np.inf
    if t <= 0:
        return -np.inf if params.a < 0 else (0.0 if params.a == 0 else -np.inf)
    val = params.a * np.log(t) - params.b * t
    if log_coords:
        val += float(np.sum(np.log(beta))) + (0.0 if eta is None else float(np.log(eta)))
    return float(val)


class _CovSolver:
    """Solves with a diagonal or dense SPD matrix."""

    def __init__(self, cov):
        cov = np.asarray(cov, dtype=float)
        self.diag = cov.ndim == 1
        if self.diag:
            self.d = cov
            self.logdet = float(np.sum(np.log(cov)))
        else:
            self.chol, _ = cholesky_with_jitter(cov)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def solve(self, b):
        if self.diag:
            return b / (self.d if np.ndim(b) == 1 else self.d[:, None])
        return linalg.cho_solve((self.chol, True), b, check_finite=False)


def _as_solver(cov):
    return cov if isinstance(cov, _CovSolver) else _CovSolver(cov)


def gibbs_sigma0(residual, cov, rng, extra_ss: float = 0.0, n_total: int | None = None) -> float:
    """Draw ``sigma0^2`` with ``sigma0^{-2} ~ Gamma(N/2, rate=(r^T C^{-1} r + extra)/2)``.

    ``cov`` is the unit-variance covariance ``R_tilde`` (dense) or the diagonal
    of ``Lambda`` (1-d).  ``extra_ss`` adds the within-replicate sum of squares.
    """
    r = np.asarray(residual, dtype=float)
    quad = float(r @ _as_solver(cov).solve(r)) + extra_ss
    if not quad > 0:
        raise ValueError("quadratic form must be positive to draw sigma0^2")
    n = r.shape[0] if n_total is None else n_total
    return 1.0 / rng.gamma(shape=0.5 * n, scale=2.0 / quad)


def gibbs_trend(residual, cov, H, sigma0_sq: float, rng) -> np.ndarray:
    """Draw ``theta_m ~ N(theta_hat, sigma0^2 (H^T C^{-1} H)^{-1})``.

    ``residual`` is ``y - f(theta)`` before removing any trend.
    """
    solver = _as_solver(cov)
    H = np.asarray(H, dtype=float)
    CiH = solver.solve(H)
    A = H.T @ CiH
    chol_a = linalg.cholesky(A, lower=True)
    mean = linalg.cho_solve((chol_a, True), CiH.T @ np.asarray(residual, dtype=float))
    z = rng.standard_normal(H.shape[1])
    # cov = sigma0^2 A^{-1} = sigma0^2 L^{-T} L^{-1}
    return mean + np.sqrt(sigma0_sq) * linalg.solve_triangular(chol_a.T, z, lower=False)


def metropolis_theta_block(theta, loglik: Callable, sd, theta_range, rng, current_ll=None):
    """One random-walk Metropolis step for the calibration parameters.

    Proposals outside ``theta_range`` have zero prior density and are rejected
    without evaluating ``loglik``.  Returns ``(theta, loglik, accepted)``.
    """
    theta = np.asarray(theta, dtype=float)
    if current_ll is None:
        current_ll = loglik(theta)
    prop = theta + np.asarray(sd, dtype=float) * rng.standard_normal(theta.shape[0])
    u = rng.random()
    tr = np.asarray(theta_range, dtype=float)
    if np.any(prop < tr[:, 0]) or np.any(prop > tr[:, 1]):
        return theta, current_ll, False
    try:
        ll = loglik(prop)
    except (NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError):
        return theta, current_ll, False
    if not np.isfinite(ll):
        return theta, current_ll, False
    if np.log(u) < ll - current_ll:
        return prop, ll, True
    return theta, current_ll, False


def metropolis_range_nugget(log_params, log_target: Callable, sd, rng, current=None):
    """Random-walk Metropolis on ``(log_beta, log_eta)`` as one block.

    ``log_target`` must already include the prior density in log coordinates.
    Returns ``(log_params, log_target, accepted)``.
    """
    log_params = np.asarray(log_params, dtype=float)
    if current is None:
        current = log_target(log_params)
    prop = log_params + np.asarray(sd, dtype=float) * rng.standard_normal(log_params.shape[0])
    u = rng.random()
    try:
        val = log_target(prop)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        return log_params, current, False
    if not np.isfinite(val):
        return log_params, current, False
    if np.log(u) < val - current:
        return prop, val, True
    return log_params, current, False


@dataclass
class McmcConfig:
    """Chain length, proposals and seeding.

    ``sd_proposal`` holds ``p_theta`` fractions of the parameter ranges followed
    by ``p_x + 1`` standard deviations for ``(log_beta, log_eta)``.
    """

    n_samples: int = 10000
    burn_in: int = 2000
    thinning: int = 1
    sd_proposal: np.ndarray | None = None
    initial_theta: np.ndarray | None = None
    initial_log_beta: np.ndarray | None = None
    initial_log_eta: float | None = None
    seed: int | None = None
    jr: JrPriorParams | None = None

    def __post_init__(self):
        if not (self.n_samples > self.burn_in >= 0):
            raise ValueError("need n_samples > burn_in >= 0")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.sd_proposal is not None:
            self.sd_proposal = np.asarray(self.sd_proposal, dtype=float)
            if np.any(self.sd_proposal <= 0):
                raise ValueError("proposal standard deviations must be positive")

    def proposal_sds(self, problem: CalibrationProblem):
        pt, px = problem.p_theta, problem.p_x
        sd = self.sd_proposal
        if sd is None:
            sd = np.concatenate([np.full(pt, 0.05), np.full(px + 1, 0.25)])
        if sd.shape[0] == pt and not problem.has_kernel:
            sd = np.concatenate([sd, np.full(px + 1, 0.25)])
        if sd.shape[0] != pt + px + 1:
            raise ValueError(f"sd_proposal needs {pt + px + 1} entries, got {sd.shape[0]}")
        width = problem.theta_range[:, 1] - problem.theta_range[:, 0]
        return sd[:pt] * width, sd[pt:]


@dataclass
class PosteriorSamples:
    """Retained draws after burn-in and thinning, one row per draw.

    Column order: ``theta`` (``p_theta``), then ``log_beta`` (``p_x``) and
    ``log_eta`` for GaSP / S-GaSP, then ``sigma0_sq``, then the trend
    coefficients (``q``).
    """

    samples: np.ndarray
    columns: list
    discrepancy: str
    p_theta: int
    p_x: int
    q: int
    accept_theta: np.ndarray
    accept_kernel: np.ndarray
    n_iterations: int
    lambda_z: np.ndarray | None = None
    jitter_max: float = 0.0

    def __len__(self):
        return self.samples.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return self.samples[:, : self.p_theta]

    @property
    def has_kernel(self) -> bool:
        return self.discrepancy != "no-discrepancy"

    @property
    def log_beta(self) -> np.ndarray | None:
        if not self.has_kernel:
            return None
        return self.samples[:, self.p_theta : self.p_theta + self.p_x]

    @property
    def log_eta(self) -> np.ndarray | None:
        if not self.has_kernel:
            return None
        return self.samples[:, self.p_theta + self.p_x]

    @property
    def _sigma_col(self) -> int:
        return self.p_theta + (self.p_x + 1 if self.has_kernel else 0)

    @property
    def sigma0_sq(self) -> np.ndarray:
        return self.samples[:, self._sigma_col]

    @property
    def theta_m(self) -> np.ndarray | None:
        if self.q == 0:
            return None
        c = self._sigma_col + 1
        return self.samples[:, c : c + self.q]

    @property
    def acceptance_rate(self) -> float:
        return len(self.accept_theta) / self.n_iterations

    @property
    def kernel_acceptance_rate(self) -> float:
        return len(self.accept_kernel) / self.n_iterations

    def summary(self, probs=(0.025, 0.5, 0.975)) -> dict:
        qs = np.quantile(self.theta, probs, axis=0)
        return {
            "discrepancy": self.discrepancy,
            "n_draws": len(self),
            "acceptance_rate": self.acceptance_rate,
            "kernel_acceptance_rate": self.kernel_acceptance_rate if self.has_kernel else None,
            "theta_median": qs[1].tolist(),
            "theta_lower": qs[0].tolist(),
            "theta_upper": qs[2].tolist(),
            "theta_mean": self.theta.mean(axis=0).tolist(),
            "max_jitter": self.jitter_max,
            "lambda_z": None if self.lambda_z is None else {
                "min": float(np.min(self.lambda_z)),
                "median": float(np.median(self.lambda_z)),
                "max": float(np.max(self.lambda_z)),
            },
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])


def _column_names(p_theta, p_x, q, has_kernel):
    cols = [f"theta_{i + 1}" for i in range(p_theta)]
    if has_kernel:
        cols += [f"log_beta_{l + 1}" for l in range(p_x)] + ["log_eta"]
    cols.append("sigma0_sq")
    cols += [f"theta_m_{j + 1}" for j in range(q)]
    return cols


def initial_theta(problem: CalibrationProblem, rng, n_candidates: int = 20) -> np.ndarray:
    """Pilot start: best of the range midpoint and an LHS by no-discrepancy profile likelihood."""
    from .testbeds import maximin_lhs

    lo, hi = problem.theta_range[:, 0], problem.theta_range[:, 1]
    cands = [0.5 * (lo + hi)]
    cands += list(lo + maximin_lhs(n_candidates, problem.p_theta, rng, n_candidates=10) * (hi - lo))
    best, best_ll = cands[0], -np.inf
    for c in cands:
        try:
            ll = no_disc_profile_loglik(problem, c)
        except (NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if ll > best_ll:
            best, best_ll = c, ll
    return np.array(best, dtype=float)


def default_kernel_start(problem: CalibrationProblem):
    """Initial ``(log_beta, log_eta)``: range at half the domain length, nugget 0.1."""
    L = problem.domain_lengths
    L = np.where(L > 0, L, 1.0)
    return -np.log(0.5 * L), float(np.log(0.1))


class _Chain:
    """Mutable sampler state with the factorized covariance cached."""

    def __init__(self, problem: CalibrationProblem):
        self.p = problem
        st = problem.stats
        self.ybar, self.lam, self.sf2, self.N = st.ybar, st.lam, st.sf2, st.n_total
        self.H = problem.trend
        self.lambda_z = None
        self.jitter_max = 0.0

    def set_kernel(self, log_beta, log_eta):
        """Factor ``R_tilde`` for the given kernel parameters; returns a state tuple."""
        p = self.p
        if not p.has_kernel:
            return (None, _CovSolver(self.lam), None)
        gamma = np.exp(-np.asarray(log_beta))
        eta = float(np.exp(log_eta))
        dm = discrepancy_matrix(p, gamma, eta)
        solver = _CovSolver(dm.M / eta + np.diag(self.lam))
        self.jitter_max = max(self.jitter_max, dm.R.jitter)
        return (dm, solver, dm.lambda_z)


def run_mcmc(problem: CalibrationProblem, config: McmcConfig | None = None) -> PosteriorSamples:
    """Draw posterior samples for the problem's discrepancy model."""
    cfg = config or McmcConfig()
    rng = np.random.default_rng(cfg.seed)
    p = problem
    pt, px, q = p.p_theta, p.p_x, p.q
    sd_theta, sd_kernel = cfg.proposal_sds(p)
    jr = cfg.jr or JrPriorParams.default(p.design)
    chain = _Chain(p)
    H = p.trend

    theta = (np.asarray(cfg.initial_theta, dtype=float).reshape(pt)
             if cfg.initial_theta is not None else initial_theta(p, rng))
    lb0, le0 = default_kernel_start(p)
    log_beta = lb0 if cfg.initial_log_beta is None else np.asarray(cfg.initial_log_beta, dtype=float)
    log_eta = le0 if cfg.initial_log_eta is None else float(cfg.initial_log_eta)
    kstate = chain.set_kernel(log_beta, log_eta)
    solver = kstate[1]

    f = p.evaluate(theta)
    r0 = chain.ybar - f
    theta_m = np.zeros(q)
    if q:
        CiH = solver.solve(H)
        theta_m = linalg.solve(H.T @ CiH, CiH.T @ r0, assume_a="pos")
    v = r0 - (H @ theta_m if q else 0.0)
    sigma0_sq = max((float(v @ solver.solve(v)) + chain.sf2) / chain.N, 1e-12)

    n_keep = (cfg.n_samples - cfg.burn_in) // cfg.thinning
    ncol = pt + (px + 1 if p.has_kernel else 0) + 1 + q
    out = np.empty((n_keep, ncol))
    lz_out = np.empty(n_keep) if p.discrepancy == "sgasp" else None
    acc_theta, acc_kernel = [], []
    row = 0

    def theta_ll(th, solver, tm, s2):
        res = chain.ybar - p.evaluate(th)
        if q:
            res = res - H @ tm
        return -0.5 * float(res @ solver.solve(res)) / s2

    ll_theta = theta_ll(theta, solver, theta_m, sigma0_sq)
    for it in range(cfg.n_samples):
        theta, _, acc = metropolis_theta_block(
            theta, lambda th: theta_ll(th, solver, theta_m, sigma0_sq), sd_theta, p.theta_range, rng, ll_theta
        )
        if acc:
            acc_theta.append(it)
        f = p.evaluate(theta)
        r0 = chain.ybar - f
        v = r0 - H @ theta_m if q else r0

        if p.has_kernel:
            cache = {}

            def kernel_value(lp, ks, v=v, s2=sigma0_sq):
                quad = float(v @ ks[1].solve(v))
                return (-0.5 * ks[1].logdet - 0.5 * quad / s2
                        + jr_log_prior(np.exp(lp[:px]), np.exp(lp[px]), jr, log_coords=True))

            def kernel_target(lp):
                ks = chain.set_kernel(lp[:px], lp[px])
                cache["prop"] = ks
                return kernel_value(lp, ks)

            cur = np.concatenate([log_beta, [log_eta]])
            new, _, acc = metropolis_range_nugget(cur, kernel_target, sd_kernel, rng, kernel_value(cur, kstate))
            if acc:
                acc_kernel.append(it)
                kstate = cache["prop"]
                log_beta, log_eta = new[:px], float(new[px])
            solver = kstate[1]

        sigma0_sq = gibbs_sigma0(v, solver, rng, extra_ss=chain.sf2, n_total=chain.N)
        if q:
            theta_m = gibbs_trend(r0, solver, H, sigma0_sq, rng)
        ll_theta = theta_ll(theta, solver, theta_m, sigma0_sq)

        k = it - cfg.burn_in + 1
        if k > 0 and k % cfg.thinning == 0 and row < n_keep:
            vals = [theta]
            if p.has_kernel:
                vals += [log_beta, [log_eta]]
            vals += [[sigma0_sq], theta_m]
            out[row] = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)) for x in vals])
            if lz_out is not None:
                lz_out[row] = kstate[2]
            row += 1

    return PosteriorSamples(
        samples=out,
        columns=_column_names(pt, px, q, p.has_kernel),
        discrepancy=p.discrepancy,
        p_theta=pt,
        p_x=px,
        q=q,
        accept_theta=np.asarray(acc_theta, dtype=int),
        accept_kernel=np.asarray(acc_kernel, dtype=int),
        n_iterations=cfg.n_samples,
        lambda_z=lz_out,
        jitter_max=chain.jitter_max,
    )
