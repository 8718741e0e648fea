"""Maximum profile-likelihood estimation with L-BFGS-B restarts.

The search runs over ``(theta, log_beta, log_eta)`` with the analytic
gradient; the trend and the noise variance are profiled in closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .kernels import pairwise_distance_range
from .mcmc import default_kernel_start
from .model import (
    CalibrationProblem,
    NonFiniteModelError,
    build_workspace,
    discrepancy_matrix,
    profile_grad,
    split_params,
)

__all__ = ["MleResult", "OptimizerFailure", "run_mle", "search_bounds"]

LOG_ETA_BOUNDS = (np.log(1e-6), np.log(1e6))


class OptimizerFailure(RuntimeError):
    """Every start failed; ``traces`` holds the per-start diagnostics."""

    def __init__(self, message, traces):
        super().__init__(message)
        self.traces = traces


@dataclass
class MleResult:
    """Point estimates at the best start.

    ``gamma``, ``eta`` and ``lambda_z`` are ``None`` for the no-discrepancy model.
    """

    discrepancy: str
    theta: np.ndarray
    gamma: np.ndarray | None
    eta: float | None
    theta_m: np.ndarray | None
    sigma0_sq: float
    loglik: float
    lambda_z: float | None = None
    traces: list = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        if self.gamma is None:
            return np.asarray(self.theta, dtype=float)
        return np.concatenate([self.theta, -np.log(self.gamma), [np.log(self.eta)]])

    def summary(self) -> dict:
        return {
            "discrepancy": self.discrepancy,
            "theta": np.asarray(self.theta).tolist(),
            "gamma": None if self.gamma is None else np.asarray(self.gamma).tolist(),
            "eta": self.eta,
            "theta_m": None if self.theta_m is None else np.asarray(self.theta_m).tolist(),
            "sigma0_sq": self.sigma0_sq,
            "loglik": self.loglik,
            "lambda_z": self.lambda_z,
            "n_starts": len(self.traces),
        }


def search_bounds(problem: CalibrationProblem) -> list:
    """Box for ``(theta, log_beta, log_eta)``.

    Ranges run from a tenth of the smallest spacing to ten domain lengths.
    """
    bounds = [tuple(r) for r in problem.theta_range]
    if problem.has_kernel:
        dmin, dmax = pairwise_distance_range(problem.design)
        for lo, hi in zip(dmin, dmax):
            hi = hi if hi > 0 else 1.0
            lo = lo if lo > 0 else hi
            bounds.append((-np.log(10.0 * hi), -np.log(0.1 * lo)))
        bounds.append(LOG_ETA_BOUNDS)
    return bounds


def _objective(problem):
    def fun(x):
        theta, gamma, eta = split_params(problem, x)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                g, val = profile_grad(problem, theta, gamma, eta, return_value=True)
        except (NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError, ValueError):
            return np.inf, np.zeros_like(x)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(x)
        return -val, -g
    return fun


def _finish(problem, x, loglik, traces) -> MleResult:
    theta, gamma, eta = split_params(problem, x)
    st = problem.stats
    f = problem.evaluate(theta)
    M, lz = None, None
    if problem.has_kernel:
        dm = discrepancy_matrix(problem, gamma, eta)
        M, lz = dm.M, dm.lambda_z
    ws = build_workspace(st.ybar, st.lam, f, M, eta if M is not None else 1.0,
                         H=problem.trend, sf2=st.sf2, n_total=st.n_total)
    return MleResult(
        discrepancy=problem.discrepancy,
        theta=np.asarray(theta, dtype=float).copy(),
        gamma=None if gamma is None else np.asarray(gamma, dtype=float),
        eta=eta,
        theta_m=ws.theta_m,
        sigma0_sq=(ws.s2 + ws.sf2) / st.n_total,
        loglik=float(loglik),
        lambda_z=lz,
        traces=traces,
    )


def run_mle(problem: CalibrationProblem, n_restarts: int = 4, initial=None, seed=None,
            maxiter: int = 500) -> MleResult:
    """Maximize the profile likelihood from ``n_restarts`` starts.

    Parameters
    ----------
    problem : CalibrationProblem
    n_restarts : int
        Number of optimizer runs; exactly this many traces are recorded.
    initial : array or sequence of arrays, optional
        Start vectors ``(theta, log_beta, log_eta)``.  Missing starts come
        first from the range midpoint with the default kernel start, then
        from a Latin hypercube over the search box.
    seed : int, optional

    Returns
    -------
    MleResult
        The best start.  Its log-likelihood is never below that of any start.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    from .testbeds import maximin_lhs

    rng = np.random.default_rng(seed)
    bounds = np.array(search_bounds(problem), dtype=float)
    starts = []
    if initial is not None:
        arr = np.atleast_2d(np.asarray(initial, dtype=float))
        starts.extend(arr[:n_restarts])
    if len(starts) < n_restarts:
        mid = problem.theta_range.mean(axis=1)
        if problem.has_kernel:
            lb, le = default_kernel_start(problem)
            mid = np.concatenate([mid, lb, [le]])
        starts.append(np.clip(mid, bounds[:, 0], bounds[:, 1]))
    extra = n_restarts - len(starts)
    if extra > 0:
        u = maximin_lhs(extra, bounds.shape[0], rng, n_candidates=20)
        starts.extend(bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0]))

    fun = _objective(problem)
    traces, best = [], None
    for x0 in starts:
        x0 = np.clip(np.asarray(x0, dtype=float), bounds[:, 0], bounds[:, 1])
        f0, _ = fun(x0)
        trace = {"x0": x0.tolist(), "loglik0": -f0, "success": False}
        try:
            res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": maxiter})
            x, fx = res.x, res.fun
            if not np.isfinite(fx) or (np.isfinite(f0) and f0 < fx):
                x, fx = x0, f0
            trace.update(x=np.asarray(x).tolist(), loglik=-float(fx), nit=int(res.nit),
                         message=str(res.message), success=bool(np.isfinite(fx)))
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            trace.update(x=None, loglik=-np.inf, message=repr(exc))
        traces.append(trace)
        if trace["success"] and (best is None or trace["loglik"] > best[1]):
            best = (np.asarray(trace["x"]), trace["loglik"])
    if best is None:
        raise OptimizerFailure("all optimizer starts failed", traces)
    return _finish(problem, best[0], best[1], traces)
