"""Test simulators, ODE integration, designs and synthetic data generators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .kernels import KernelSpec, cholesky_with_jitter, corr_matrix

__all__ = [
    "BAYARRI07_INPUT",
    "BAYARRI07_OUTPUT",
    "BOX_TIMES",
    "BOX_OUTPUT",
    "OdeSystem",
    "OdeBlowUpError",
    "bayarri07",
    "bayarri07_truth",
    "bayarri07_jacobian",
    "rk4_solve",
    "box_system",
    "box_model",
    "box_analytic",
    "BoxModel",
    "lorenz96_rhs",
    "lorenz96_simulate",
    "lorenz96_initial_state",
    "lorenz96_scenario",
    "Lorenz96Model",
    "maximin_lhs",
    "multisource_simulate",
    "sin_model",
    "SIMULATORS",
]

BAYARRI07_INPUT = np.array([0.110, 0.432, 0.754, 1.077, 1.399, 1.721, 2.043, 2.366, 2.688, 3.010])

# One row per input, three replicates each.
BAYARRI07_OUTPUT = np.array([
    4.730, 4.720, 4.234, 3.177, 2.966, 3.653, 1.970, 2.267, 2.084, 2.079,
    2.409, 2.371, 1.908, 1.665, 1.685, 1.773, 1.603, 1.922, 1.370, 1.661,
    1.757, 1.868, 1.505, 1.638, 1.390, 1.275, 1.679, 1.461, 1.157, 1.530,
]).reshape(10, 3)

BOX_TIMES = np.array([10.0, 20.0, 40.0, 80.0, 160.0, 320.0])

# Filled column by column: two replicate columns of six.
BOX_OUTPUT = np.array(
    [19.2, 14, 14.4, 24, 42.3, 30.8, 42.1, 40.5, 40.7, 46.4, 27.1, 22.3]
).reshape(2, 6).T


def bayarri07(x, theta):
    """``5 exp(-theta x)``; ``x`` is an (n, 1) design or a vector."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return 5.0 * np.exp(-np.atleast_1d(theta)[0] * x)


def bayarri07_jacobian(x, theta):
    x = np.asarray(x, dtype=float).reshape(-1)
    return (-5.0 * x * np.exp(-np.atleast_1d(theta)[0] * x)).reshape(-1, 1)


def bayarri07_truth(x):
    """The reality ``3.5 exp(-1.7 x) + 1.5`` generating the field data."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return 3.5 * np.exp(-1.7 * x) + 1.5


def sin_model(x, theta):
    """``sin(theta x)``, the computer model of the multi-source example."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.sin(np.atleast_1d(theta)[0] * x)


class OdeBlowUpError(FloatingPointError):
    """The state became non-finite; ``trajectory`` holds the rows computed so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class OdeSystem:
    """``dy/dt = rhs(t, y, params)`` from ``init`` at ``t0``, reported at ``times``."""

    rhs: Callable
    init: np.ndarray
    times: np.ndarray
    t0: float = 0.0

    @property
    def dim(self) -> int:
        return np.asarray(self.init).shape[0]


def rk4_solve(system: OdeSystem, step: float, params=None) -> np.ndarray:
    """Classical fourth-order Runge-Kutta, returning the state at ``system.times``.

    Each reporting interval is split into equal sub-steps no longer than
    ``step``.  Output has shape ``(len(times), dim)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    f = system.rhs
    y = np.array(system.init, dtype=float)
    t = float(system.t0)
    times = np.asarray(system.times, dtype=float)
    out = np.empty((times.shape[0], y.shape[0]))
    with np.errstate(over="ignore", invalid="ignore"):
        _rk4_loop(f, y, t, times, step, params, out)
    return out


def _rk4_loop(f, y, t, times, step, params, out):
    for i, t_next in enumerate(times):
        span = t_next - t
        if span < -1e-12:
            raise ValueError("reporting times must be increasing and >= t0")
        m = int(np.ceil(span / step - 1e-9)) if span > 0 else 0
        if m:
            h = span / m
            for _ in range(m):
                k1 = f(t, y, params)
                k2 = f(t + h / 2, y + h / 2 * k1, params)
                k3 = f(t + h / 2, y + h / 2 * k2, params)
                k4 = f(t + h, y + h * k3, params)
                y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                t += h
            if not np.all(np.isfinite(y)):
                raise OdeBlowUpError(f"state is not finite at t={t:g}", out[:i])
        t = t_next
        out[i] = y


def _box_rhs(t, y, params):
    k1, k2 = params
    return np.array([-k1 * y[0], k1 * y[0] - k2 * y[1]])


def box_system(times) -> OdeSystem:
    return OdeSystem(rhs=_box_rhs, init=np.array([100.0, 0.0]), times=np.asarray(times, dtype=float))


def box_model(times, theta1, theta2, step: float = 1.0) -> np.ndarray:
    """Second species of the two-species reaction model at ``times``.

    Rates are ``10**(theta - 3)``; starts from ``(100, 0)`` at ``t = 0``.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    order = np.argsort(times)
    rates = (10.0 ** (theta1 - 3.0), 10.0 ** (theta2 - 3.0))
    traj = rk4_solve(box_system(times[order]), step, rates)
    out = np.empty(times.shape[0])
    out[order] = traj[:, 1]
    return out


def box_analytic(times, theta1, theta2) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    k1, k2 = 10.0 ** (theta1 - 3.0), 10.0 ** (theta2 - 3.0)
    if np.isclose(k1, k2):
        return 100.0 * k1 * t * np.exp(-k1 * t)
    return 100.0 * k1 / (k2 - k1) * (np.exp(-k1 * t) - np.exp(-k2 * t))


class BoxModel:
    """Computer-model wrapper ``model(design, theta)`` around the RK4 box solver.

    ``calls`` counts solver invocations.
    """

    def __init__(self, step: float = 1.0):
        self.step = step
        self.calls = 0

    def __call__(self, design, theta):
        self.calls += 1
        theta = np.asarray(theta, dtype=float)
        return box_model(np.asarray(design).reshape(-1), theta[0], theta[1], self.step)


def lorenz96_rhs(t, x, force):
    """``(x_{j+1} - x_{j-2}) x_{j-1} - x_j + force`` with cyclic indices."""
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + force


def lorenz96_simulate(theta, x0, n_times: int = 40, h: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Lorenz-96 with forcing ``theta``.

    Returns ``(times, states)`` with ``times = h, 2h, ..., n_times h`` and
    ``states`` of shape ``(n_times, k)``.
    """
    times = h * np.arange(1, n_times + 1)
    system = OdeSystem(rhs=lorenz96_rhs, init=np.asarray(x0, dtype=float), times=times)
    return times, rk4_solve(system, h, float(np.atleast_1d(theta)[0]))


def lorenz96_initial_state(k: int, rng, scale=None) -> np.ndarray:
    """Gaussian initial state whose covariance is a Wishart(k, scale) draw.

    ``scale`` defaults to the identity.
    """
    scale = np.eye(k) if scale is None else np.asarray(scale, dtype=float)
    cov = stats.wishart(df=k, scale=scale).rvs(random_state=rng)
    return rng.multivariate_normal(np.zeros(k), cov)


def lorenz96_scenario(scenario: int = 1, theta: float = 8.0, k: int = 40, n_times: int = 40,
                      h: float = 0.05, obs_fraction: float = 0.05, noise_sd: float = 1.0,
                      rng=None) -> dict:
    """Synthetic Lorenz-96 field data.

    Scenario 1 observes states with Gaussian noise; scenario 2 adds the bias
    ``2 t sin(2 pi j / k)``.  ``round(obs_fraction * k)`` states are observed at
    every time point.  Design rows are ``(t, j)`` with 1-based ``j``.
    """
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    rng = np.random.default_rng(rng)
    x0 = lorenz96_initial_state(k, rng)
    times, states = lorenz96_simulate(theta, x0, n_times, h)
    j = np.arange(1, k + 1)
    reality = states.copy()
    if scenario == 2:
        reality = reality + 2.0 * times[:, None] * np.sin(2 * np.pi * j[None, :] / k)
    field = reality + noise_sd * rng.standard_normal(reality.shape)
    m = max(1, int(round(obs_fraction * k)))
    rows, obs = [], []
    for ti, t in enumerate(times):
        picks = np.sort(rng.choice(k, size=m, replace=False))
        for pj in picks:
            rows.append((t, pj + 1))
            obs.append(field[ti, pj])
    return {
        "x0": x0,
        "times": times,
        "states": states,
        "reality": reality,
        "field": field,
        "design": np.array(rows, dtype=float),
        "observations": np.array(obs),
        "theta": theta,
        "h": h,
    }


class Lorenz96Model:
    """Computer-model wrapper: design rows ``(t, j)`` pick states of one trajectory."""

    def __init__(self, x0, h: float = 0.05):
        self.x0 = np.asarray(x0, dtype=float)
        self.h = h
        self.calls = 0

    def __call__(self, design, theta):
        self.calls += 1
        design = np.asarray(design, dtype=float).reshape(-1, 2)
        ti = np.rint(design[:, 0] / self.h).astype(int) - 1
        n_times = int(ti.max()) + 1
        _, states = lorenz96_simulate(theta, self.x0, n_times, self.h)
        return states[ti, design[:, 1].astype(int) - 1]


def maximin_lhs(D: int, p: int, rng=None, n_candidates: int = 200) -> np.ndarray:
    """Best-of-``n_candidates`` Latin hypercube by minimum pairwise distance.

    Every column places exactly one point in each of the ``D`` strata of [0, 1].
    """
    if D < 1 or p < 1:
        raise ValueError("need D >= 1 and p >= 1")
    rng = np.random.default_rng(rng)
    best, best_d = None, -np.inf
    for _ in range(max(1, n_candidates)):
        pts = np.column_stack([(rng.permutation(D) + rng.random(D)) / D for _ in range(p)])
        if D > 1:
            diff = pts[:, None, :] - pts[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            dmin = dist[np.triu_indices(D, 1)].min()
        else:
            dmin = 0.0
        if dmin > best_d:
            best, best_d = pts, dmin
    return best


def multisource_simulate(n: int = 100, k: int = 5, rng=None, sigma: float = 0.2,
                         bias_var=None, noise_sd: float = 0.05, gamma: float = 1 / 30,
                         gamma_bias: float = 1 / 10) -> dict:
    """Sources ``y_l = sin(pi x) + delta(x) + delta_l(x) + eps_l`` on an equispaced grid.

    ``delta`` has variance ``sigma^2`` and range ``gamma``; each ``delta_l`` has
    variance ``bias_var[l]`` (default ``0.5 + (l - 1) * 0.5 / (k - 1)``) and
    range ``gamma_bias``.  Both use the Matern 5/2 kernel.
    """
    rng = np.random.default_rng(rng)
    x = np.linspace(0.0, 1.0, n)
    if bias_var is None:
        bias_var = 0.5 + np.arange(k) * (1.0 - 0.5) / max(k - 1, 1)
    bias_var = np.broadcast_to(np.asarray(bias_var, dtype=float), (k,))
    spec = KernelSpec("matern_5_2", 1)
    L_shared, _ = cholesky_with_jitter(corr_matrix(x, spec, [gamma]).R)
    L_bias, _ = cholesky_with_jitter(corr_matrix(x, spec, [gamma_bias]).R)
    delta = sigma * (L_shared @ rng.standard_normal(n))
    biases = np.array([np.sqrt(bias_var[l]) * (L_bias @ rng.standard_normal(n)) for l in range(k)])
    reality = np.sin(np.pi * x) + delta
    obs = reality[None, :] + biases + noise_sd * rng.standard_normal((k, n))
    return {
        "x": x,
        "observations": obs,
        "reality": reality,
        "delta": delta,
        "biases": biases,
        "theta": np.pi,
        "bias_var": np.array(bias_var),
    }


SIMULATORS = {
    "bayarri07": bayarri07,
    "sin": sin_model,
}
