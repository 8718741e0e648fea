"""Gaussian-process emulators of simulators.

Both emulators use a constant mean and a product Matern 5/2 kernel (any
``KernelSpec`` works).  Range and nugget parameters sit at the mode of the
marginal likelihood, with the mean and variance integrated out, times the
jointly robust prior.  The vector-output emulator shares one correlation
over the inputs across all output coordinates and keeps a separate mean and
variance per coordinate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

from .kernels import KernelSpec, cholesky_with_jitter, corr_matrix, cross_corr, pairwise_distance_range
from .model import CalibrationProblem

__all__ = [
    "FittedEmulator",
    "EmulatorPrediction",
    "EmulatorFormatError",
    "EmulatorModel",
    "FORMAT_VERSION",
    "fit_scalar",
    "fit_ppgasp",
    "emu_predict",
    "bind_emulator",
    "save_emulator",
    "load_emulator",
    "emulator_log_post",
]

FORMAT_VERSION = 1
_LOG_ETA_BOUNDS = (np.log(1e-8), np.log(10.0))


class EmulatorFormatError(ValueError):
    """A saved emulator could not be read."""


@dataclass
class FittedEmulator:
    """A fitted emulator; arrays are treated as read-only.

    ``outputs`` is ``(D, k)``; ``scalar`` marks a one-coordinate fit.
    ``weights`` holds ``R_t^{-1} (Y - 1 mu^T)`` for the predictive mean.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    kernel: KernelSpec
    gamma: np.ndarray
    eta: float
    nugget: bool
    mu: np.ndarray
    sigma2: np.ndarray
    chol: np.ndarray
    weights: np.ndarray
    ri_one: np.ndarray
    one_ri_one: float
    jitter: float
    log_post: float
    scalar: bool

    @property
    def D(self) -> int:
        return self.inputs.shape[0]

    @property
    def k(self) -> int:
        return self.outputs.shape[1]

    @property
    def p(self) -> int:
        return self.inputs.shape[1]

    def report(self) -> dict:
        """Hyperparameters and leave-one-out diagnostics."""
        loo = loo_residuals(self)
        span = np.ptp(self.outputs)
        return {
            "type": "scalar" if self.scalar else "ppgasp",
            "D": self.D,
            "k": self.k,
            "p": self.p,
            "gamma": self.gamma.tolist(),
            "eta": self.eta,
            "nugget": self.nugget,
            "jitter": self.jitter,
            "log_post": self.log_post,
            "loo_rmse": float(np.sqrt(np.mean(loo ** 2))),
            "loo_rmse_relative": float(np.sqrt(np.mean(loo ** 2)) / span) if span > 0 else 0.0,
        }


@dataclass
class EmulatorPrediction:
    mean: np.ndarray
    var: np.ndarray
    extrapolated: np.ndarray


def _prep(inputs, outputs):
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(outputs, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape[0] != x.shape[0]:
        raise ValueError("inputs and outputs need the same number of rows")
    if x.shape[0] < x.shape[1] + 2:
        raise ValueError("emulator design needs at least p + 2 runs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("emulator design contains non-finite values")
    return x, y


def _jr_default(x):
    D, p = x.shape
    a = 0.2
    span = np.ptp(x, axis=0)
    span = np.where(span > 0, span, 1.0)
    return a, D ** (-1.0 / p) * (a + p), D ** (-1.0 / p) * span


def _factor(x, y, spec, gamma, eta):
    R = corr_matrix(x, spec, gamma).R
    if eta > 0:
        R = R + eta * np.eye(x.shape[0])
    chol, jitter = cholesky_with_jitter(R)
    one = np.ones(x.shape[0])
    ri_one = linalg.cho_solve((chol, True), one, check_finite=False)
    s = float(one @ ri_one)
    ri_y = linalg.cho_solve((chol, True), y, check_finite=False)
    mu = (ri_one @ y) / s
    resid = y - mu[None, :]
    weights = ri_y - np.outer(ri_one, mu)
    s2 = np.sum(resid * weights, axis=0)
    return chol, jitter, ri_one, s, mu, weights, s2


def emulator_log_post(x, y, spec, log_beta, log_eta=None, prior=None) -> float:
    """Log marginal posterior of ``(beta, eta)`` summed over output coordinates.

    Each coordinate contributes
    ``-0.5 log|R_t| - 0.5 log(1^T R_t^{-1} 1) - (D - 1)/2 log S_j^2`` with
    ``R_t = R + eta I``; the jointly robust prior is added once.
    """
    D, k = y.shape
    beta = np.exp(np.asarray(log_beta, dtype=float))
    eta = 0.0 if log_eta is None else float(np.exp(log_eta))
    a, b, C = prior if prior is not None else _jr_default(x)
    chol, _, _, s, _, _, s2 = _factor(x, y, spec, 1.0 / beta, eta)
    s2 = np.maximum(s2, 1e-300)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    val = k * (-0.5 * logdet - 0.5 * np.log(s)) - 0.5 * (D - 1) * np.sum(np.log(s2))
    t = float(C @ beta) + eta
    return float(val + a * np.log(t) - b * t)


def _fit(x, y, nugget, kernel, n_restarts, seed, scalar) -> FittedEmulator:
    from .testbeds import maximin_lhs

    D, p = x.shape
    spec = kernel if kernel is not None else KernelSpec("matern_5_2", p)
    if spec.dim != p:
        raise ValueError("kernel dimension does not match the emulator inputs")
    if np.all(np.ptp(y, axis=0) == 0):
        warnings.warn("emulator outputs are constant", RuntimeWarning, stacklevel=3)
    dmin, dmax = pairwise_distance_range(x)
    bounds = [(-np.log(100.0 * hi), -np.log(0.05 * lo)) for lo, hi in zip(dmin, dmax)]
    if nugget:
        bounds.append(_LOG_ETA_BOUNDS)
    bounds = np.array(bounds)
    prior = _jr_default(x)

    def neg(z):
        try:
            v = emulator_log_post(x, y, spec, z[:p], z[p] if nugget else None, prior)
        except np.linalg.LinAlgError:
            return 1e300
        return -v if np.isfinite(v) else 1e300

    rng = np.random.default_rng(seed)
    start0 = -np.log(0.5 * np.where(dmax > 0, dmax, 1.0))
    if nugget:
        start0 = np.append(start0, np.log(1e-4))
    starts = [np.clip(start0, bounds[:, 0], bounds[:, 1])]
    if n_restarts > 1:
        u = maximin_lhs(n_restarts - 1, bounds.shape[0], rng, n_candidates=20)
        starts.extend(bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0]))
    best = None
    for z0 in starts[:max(n_restarts, 1)]:
        res = optimize.minimize(neg, z0, method="L-BFGS-B", bounds=bounds)
        z, fz = (res.x, res.fun) if res.fun <= neg(z0) else (z0, neg(z0))
        if best is None or fz < best[1]:
            best = (np.asarray(z), fz)
    if best is None or best[1] >= 1e300:
        raise RuntimeError("emulator hyperparameter search failed at every start")
    z = best[0]
    gamma = np.exp(-z[:p])
    eta = float(np.exp(z[p])) if nugget else 0.0
    chol, jitter, ri_one, s, mu, weights, s2 = _factor(x, y, spec, gamma, eta)
    return FittedEmulator(
        inputs=x, outputs=y, kernel=spec, gamma=gamma, eta=eta, nugget=nugget, mu=mu,
        sigma2=np.maximum(s2, 0.0) / (D - 1), chol=chol, weights=weights, ri_one=ri_one,
        one_ri_one=s, jitter=jitter, log_post=-float(best[1]), scalar=scalar,
    )


def fit_scalar(inputs, outputs, nugget: bool = False, kernel: KernelSpec | None = None,
               n_restarts: int = 3, seed=None) -> FittedEmulator:
    """Fit a scalar-output emulator.

    Parameters
    ----------
    inputs : array, shape (D, p)
        Simulator inputs; for calibration these are ``(x, theta)`` rows.
    outputs : array, shape (D,)
    nugget : bool
        Estimate a nugget; otherwise the fit interpolates.
    """
    x, y = _prep(inputs, outputs)
    if y.shape[1] != 1:
        raise ValueError("fit_scalar needs a single output column")
    return _fit(x, y, nugget, kernel, n_restarts, seed, scalar=True)


def fit_ppgasp(inputs, outputs, nugget: bool = False, kernel: KernelSpec | None = None,
               n_restarts: int = 3, seed=None) -> FittedEmulator:
    """Fit the parallel partial emulator to ``(D, k)`` outputs over ``(D, p)`` inputs."""
    x, y = _prep(inputs, outputs)
    return _fit(x, y, nugget, kernel, n_restarts, seed, scalar=False)


def emu_predict(em: FittedEmulator, x_star, loc_index=None, return_var: bool = True) -> EmulatorPrediction:
    """Predictive mean (and variance) at ``m`` new inputs.

    The mean has shape ``(m, k)``, or ``(m, len(loc_index))`` when
    ``loc_index`` (0-based output coordinates) is given.  ``extrapolated``
    flags inputs outside the bounding box of the design.
    """
    xs = np.asarray(x_star, dtype=float)
    if xs.ndim == 1:
        xs = xs.reshape(1, -1) if em.p > 1 or xs.shape[0] == 1 else xs.reshape(-1, 1)
    if xs.shape[1] != em.p:
        raise ValueError(f"emulator expects {em.p} inputs, got {xs.shape[1]}")
    r = cross_corr(em.inputs, xs, em.kernel, em.gamma).reshape(em.D, -1)
    W, mu, s2 = em.weights, em.mu, em.sigma2
    if loc_index is not None:
        idx = np.asarray(loc_index, dtype=int)
        if np.any(idx < 0) or np.any(idx >= em.k):
            raise ValueError("loc_index outside the emulator output coordinates")
        W, mu, s2 = W[:, idx], mu[idx], s2[idx]
    mean = mu[None, :] + r.T @ W
    lo, hi = em.inputs.min(axis=0), em.inputs.max(axis=0)
    extrap = np.any((xs < lo) | (xs > hi), axis=1)
    var = None
    if return_var:
        Lr = linalg.solve_triangular(em.chol, r, lower=True, check_finite=False)
        c = 1.0 + em.eta - np.sum(Lr * Lr, axis=0)
        c = c + (1.0 - em.ri_one @ r) ** 2 / em.one_ri_one
        var = np.maximum(c, 0.0)[:, None] * s2[None, :]
    return EmulatorPrediction(mean=mean, var=var, extrapolated=extrap)


def loo_residuals(em: FittedEmulator) -> np.ndarray:
    """Closed-form leave-one-out residuals at fixed hyperparameters (mean re-profiled)."""
    Ri = linalg.cho_solve((em.chol, True), np.eye(em.D), check_finite=False)
    # Absorb the constant mean into the precision: P = Ri - Ri 1 1^T Ri / (1^T Ri 1).
    P = Ri - np.outer(em.ri_one, em.ri_one) / em.one_ri_one
    Py = P @ em.outputs
    d = np.diag(P)
    d = np.where(d > 1e-14, d, np.nan)
    return np.nan_to_num(Py / d[:, None])


class EmulatorModel:
    """Calibration-ready computer model backed by an emulator.

    Scalar emulators take ``(x, theta)`` rows.  Vector emulators take
    ``theta`` and map every design row to an output coordinate, either by
    matching the row against ``output_coords`` or through a fixed
    ``loc_index`` for the field design.
    """

    def __init__(self, em: FittedEmulator, output_coords=None, loc_index=None):
        self.em = em
        self.coords = None if output_coords is None else np.asarray(output_coords, dtype=float)
        if self.coords is not None and self.coords.ndim == 1:
            self.coords = self.coords.reshape(-1, 1)
        self.loc_index = None if loc_index is None else np.asarray(loc_index, dtype=int)
        self.calls = 0

    def _locate(self, design):
        if self.coords is not None:
            d = np.asarray(design, dtype=float).reshape(design.shape[0], -1)
            hit = np.all(np.isclose(d[:, None, :], self.coords[None, :, :], rtol=0, atol=1e-9), axis=2)
            if not np.all(hit.any(axis=1)):
                raise ValueError("design rows without a matching emulator output coordinate")
            return hit.argmax(axis=1)
        if self.loc_index is not None:
            if design.shape[0] != self.loc_index.shape[0]:
                raise ValueError("loc_index length does not match the design")
            return self.loc_index
        if design.shape[0] != self.em.k:
            raise ValueError("need output_coords or loc_index to map design rows to outputs")
        return np.arange(self.em.k)

    def __call__(self, design, theta):
        self.calls += 1
        design = np.asarray(design, dtype=float)
        if design.ndim == 1:
            design = design.reshape(-1, 1)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.em.scalar and self.em.p == design.shape[1] + theta.shape[0]:
            rows = np.hstack([design, np.broadcast_to(theta, (design.shape[0], theta.shape[0]))])
            return emu_predict(self.em, rows, return_var=False).mean[:, 0]
        if self.em.p != theta.shape[0]:
            raise ValueError("emulator inputs do not match the calibration parameters")
        idx = self._locate(design)
        return emu_predict(self.em, theta.reshape(1, -1), loc_index=idx, return_var=False).mean[0]


def bind_emulator(problem: CalibrationProblem, em: FittedEmulator, output_coords=None,
                  loc_index=None) -> CalibrationProblem:
    """Return a copy of ``problem`` whose computer model is the emulator mean.

    The emulator is only evaluated, never refitted on field data.
    """
    model = EmulatorModel(em, output_coords, loc_index)
    model(problem.design, problem.theta_range.mean(axis=1))
    model.calls = 0
    return replace(problem, model=model, model_jacobian=None)


_ARRAYS = ("inputs", "outputs", "gamma", "mu", "sigma2", "chol", "weights", "ri_one")


def save_emulator(em: FittedEmulator, path) -> None:
    """Write a versioned ``.npz`` holding everything prediction needs."""
    data = {name: getattr(em, name) for name in _ARRAYS}
    np.savez(
        path,
        format_version=np.array(FORMAT_VERSION),
        families=np.array(em.kernel.families),
        alphas=np.array(em.kernel.alphas, dtype=float),
        scalars=np.array([em.eta, em.one_ri_one, em.jitter, em.log_post]),
        flags=np.array([em.nugget, em.scalar]),
        **data,
    )


def load_emulator(path) -> FittedEmulator:
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["format_version"]) if "format_version" in z.files else None
            if version != FORMAT_VERSION:
                raise EmulatorFormatError(
                    f"emulator file version mismatch: found {version}, expected {FORMAT_VERSION}"
                )
            arrays = {name: z[name] for name in _ARRAYS}
            fams = [str(f) for f in z["families"]]
            alphas = [float(a) for a in z["alphas"]]
            eta, s, jitter, lp = (float(v) for v in z["scalars"])
            nugget, scalar = (bool(v) for v in z["flags"])
    except EmulatorFormatError:
        raise
    except Exception as exc:  # zip, key or dtype errors all mean a bad file
        raise EmulatorFormatError(f"cannot read emulator file {path}: {exc}") from exc
    spec = KernelSpec(tuple(fams), len(fams), alpha=tuple(alphas))
    return FittedEmulator(kernel=spec, eta=eta, nugget=nugget, one_ri_one=s, jitter=jitter,
                          log_post=lp, scalar=scalar, **arrays)
