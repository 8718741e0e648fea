"""Shared dense oracles and small problem builders."""

import numpy as np
import pytest

from gpcalib.kernels import KernelSpec, corr_matrix
from gpcalib.model import CalibrationProblem


def dense_profile_loglik(y_groups, f, M, eta, H=None, weights=None):
    """Profiled Gaussian log-density of all raw observations, built densely.

    Covariance of the stacked observations is
    ``sigma0^2 (Z M Z^T / eta + diag(1 / w))``; the trend and ``sigma0^2`` are
    maximized out in closed form.
    """
    n = len(y_groups)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    idx = np.concatenate([np.full(len(g), i) for i, g in enumerate(y_groups)])
    y = np.concatenate([np.asarray(g, dtype=float) for g in y_groups])
    N = y.size
    Z = np.zeros((N, n))
    Z[np.arange(N), idx] = 1.0
    S = np.diag(1.0 / w[idx])
    if M is not None:
        S = S + Z @ M @ Z.T / eta
    Si = np.linalg.inv(S)
    r = y - Z @ f
    if H is not None:
        HZ = Z @ H
        tm = np.linalg.solve(HZ.T @ Si @ HZ, HZ.T @ Si @ r)
        r = r - HZ @ tm
    s2 = r @ Si @ r / N
    _, logdet = np.linalg.slogdet(S)
    return -0.5 * (N * np.log(2 * np.pi * s2) + logdet + N)


def dense_reduced_loglik(ybar, lam, f, M, eta, H=None):
    """``-0.5 log|R_t| - (n/2) log(v^T R_t^{-1} v)`` with an explicit inverse (no replicates)."""
    Rt = np.diag(lam) if M is None else M / eta + np.diag(lam)
    Ri = np.linalg.inv(Rt)
    r = ybar - f
    if H is not None:
        tm = np.linalg.solve(H.T @ Ri @ H, H.T @ Ri @ r)
        r = r - H @ tm
    _, logdet = np.linalg.slogdet(Rt)
    val = -0.5 * len(ybar) * np.log(r @ Ri @ r)
    return val - 0.5 * logdet if M is not None else val


def linear_model(x, theta):
    x = np.asarray(x, dtype=float).reshape(-1)
    return theta[0] + theta[1] * x


def exp_model(x, theta):
    x = np.asarray(x, dtype=float)
    x = x.reshape(x.shape[0], -1)
    return 5.0 * np.exp(-theta[0] * x[:, 0]) + theta[1] * np.sin(x[:, -1])


def exp_jacobian(x, theta):
    x = np.asarray(x, dtype=float)
    x = x.reshape(x.shape[0], -1)
    return np.column_stack([-5.0 * x[:, 0] * np.exp(-theta[0] * x[:, 0]), np.sin(x[:, -1])])


@pytest.fixture
def small_problem():
    def make(discrepancy="gasp", n=6, p_x=1, trend=True, seed=0, replicates=1, lambda_z=None):
        rng = np.random.default_rng(seed)
        x = rng.random((n, p_x)) * 3
        truth = 3.5 * np.exp(-1.7 * x[:, 0]) + 1.5
        obs = truth[:, None] + 0.2 * rng.standard_normal((n, replicates))
        return CalibrationProblem(
            design=x,
            observations=obs[:, 0] if replicates == 1 else obs,
            model=exp_model,
            theta_range=[[0.0, 5.0], [-2.0, 2.0]],
            trend=np.column_stack([np.ones(n), x[:, 0]]) if trend else None,
            discrepancy=discrepancy,
            kernel=KernelSpec("matern_5_2", p_x),
            lambda_z=lambda_z,
            model_jacobian=exp_jacobian,
        )

    return make


def corr(x, gamma, family="matern_5_2"):
    x = np.asarray(x, dtype=float)
    x = x.reshape(x.shape[0], -1)
    return corr_matrix(x, KernelSpec(family, x.shape[1]), gamma).R
