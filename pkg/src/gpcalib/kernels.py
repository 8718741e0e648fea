"""Product correlation kernels, correlation matrices and the scaled (S-GaSP) kernel.

All kernels act on absolute coordinate-wise displacements ``d_l = |x_a,l - x_b,l|``
and a positive range parameter ``gamma_l`` per input dimension.  The full
correlation is the product of the one-dimensional factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "FAMILIES",
    "KernelSpec",
    "CorrelationMatrix",
    "ScaledCorrelation",
    "SingularCorrelationError",
    "kernel_eval",
    "corr_matrix",
    "cross_corr",
    "corr_derivatives",
    "scaled_corr",
    "scaled_cross",
    "cholesky_with_jitter",
]

FAMILIES = ("matern_5_2", "matern_3_2", "pow_exp")

# Jitter ladder, as multiples of mean(diag).
_JITTER_LADDER = (0.0,) + tuple(10.0 ** e for e in range(-10, -3))

_SQRT5 = np.sqrt(5.0)
_SQRT3 = np.sqrt(3.0)


class SingularCorrelationError(np.linalg.LinAlgError):
    """Raised when a correlation matrix stays indefinite after the full jitter ladder."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family per input dimension.

    Parameters
    ----------
    family : str or sequence of str
        ``'matern_5_2'``, ``'matern_3_2'`` or ``'pow_exp'``.  A single string
        is broadcast over all ``dim`` dimensions.
    dim : int
        Number of observable inputs ``p_x``.
    alpha : float or sequence of float
        Roughness of the power-exponential family, ``0 < alpha <= 2``.
        Ignored for Matern dimensions.
    """

    family: str | tuple = "matern_5_2"
    dim: int = 1
    alpha: float | tuple = 1.9
    families: tuple = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("kernel dimension must be >= 1")
        fam = (self.family,) * self.dim if isinstance(self.family, str) else tuple(self.family)
        if len(fam) != self.dim:
            raise ValueError(f"expected {self.dim} kernel families, got {len(fam)}")
        for f in fam:
            if f not in FAMILIES:
                raise ValueError(f"unknown kernel family {f!r}; choose from {FAMILIES}")
        alphas = np.broadcast_to(np.asarray(self.alpha, dtype=float), (self.dim,)).copy()
        for f, a in zip(fam, alphas):
            if f == "pow_exp" and not (0.0 < a <= 2.0):
                raise ValueError(f"pow_exp roughness must lie in (0, 2], got {a}")
        object.__setattr__(self, "families", fam)
        object.__setattr__(self, "alphas", alphas)


def _as_gamma(spec: KernelSpec, gamma) -> np.ndarray:
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.shape != (spec.dim,):
        raise ValueError(f"range parameter has shape {gamma.shape}, expected ({spec.dim},)")
    if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
        raise ValueError("range parameters must be finite and positive")
    return gamma


def _as_design(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"inputs have shape {x.shape}, expected (n, {dim})")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    return x


def _factor(family: str, alpha: float, d: np.ndarray, gamma: float) -> np.ndarray:
    d = np.abs(d)
    if family == "matern_5_2":
        s = _SQRT5 * d / gamma
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    if family == "matern_3_2":
        s = _SQRT3 * d / gamma
        return (1.0 + s) * np.exp(-s)
    return np.exp(-((d / gamma) ** alpha))


def _factor_dlog_gamma(family: str, alpha: float, d: np.ndarray, gamma: float) -> np.ndarray:
    """Derivative of a one-dimensional factor with respect to log(gamma)."""
    d = np.abs(d)
    if family == "matern_5_2":
        s = _SQRT5 * d / gamma
        return s * s * (1.0 + s) / 3.0 * np.exp(-s)
    if family == "matern_3_2":
        s = _SQRT3 * d / gamma
        return s * s * np.exp(-s)
    u = (d / gamma) ** alpha
    return alpha * u * np.exp(-u)


def kernel_eval(spec: KernelSpec, gamma, d) -> float:
    """Product correlation at a single displacement vector ``d``."""
    gamma = _as_gamma(spec, gamma)
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if d.shape != (spec.dim,):
        raise ValueError(f"displacement has shape {d.shape}, expected ({spec.dim},)")
    if not np.all(np.isfinite(d)):
        raise ValueError("displacement must be finite")
    val = 1.0
    for l in range(spec.dim):
        val *= float(_factor(spec.families[l], spec.alphas[l], d[l], gamma[l]))
    return val


def _cross(spec: KernelSpec, gamma: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    out = np.ones((xa.shape[0], xb.shape[0]))
    for l in range(spec.dim):
        d = xa[:, l][:, None] - xb[:, l][None, :]
        out *= _factor(spec.families[l], spec.alphas[l], d, gamma[l])
    return out


def cholesky_with_jitter(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``mat``, escalating diagonal jitter if needed.

    Returns the factor and the absolute jitter added to the diagonal.
    """
    scale = float(np.mean(np.diag(mat))) if mat.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    eye = np.eye(mat.shape[0])
    for rel in _JITTER_LADDER:
        jitter = rel * scale
        try:
            return linalg.cholesky(mat + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            continue
    raise SingularCorrelationError(
        f"Cholesky failed even with jitter {_JITTER_LADDER[-1]:.0e} * mean(diag)"
    )


@dataclass
class CorrelationMatrix:
    """Symmetric correlation matrix with a cached Cholesky factor."""

    R: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.R.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def corr_matrix(design, spec: KernelSpec, gamma) -> CorrelationMatrix:
    """Correlation matrix ``R[i, j] = K(x_i, x_j)`` with its Cholesky factor."""
    gamma = _as_gamma(spec, gamma)
    x = _as_design(design, spec.dim)
    if x.shape[0] < 1:
        raise ValueError("design must have at least one row")
    R = _cross(spec, gamma, x, x)
    chol, jitter = cholesky_with_jitter(R)
    return CorrelationMatrix(R=R, chol=chol, jitter=jitter)


def cross_corr(design, x_new, spec: KernelSpec, gamma) -> np.ndarray:
    """Cross correlations between design rows and new inputs.

    A single point (vector of length ``p_x``) gives an ``n`` vector; a matrix of
    ``m`` points gives an ``n x m`` array.
    """
    gamma = _as_gamma(spec, gamma)
    x = np.asarray(design, dtype=float)
    if x.size == 0:
        return np.zeros(0)
    x = _as_design(x, spec.dim)
    xs = np.asarray(x_new, dtype=float)
    single = xs.ndim == 1 and (spec.dim > 1 or xs.shape[0] == 1)
    if single:
        xs = xs.reshape(1, -1)
    xs = _as_design(xs, spec.dim)
    out = _cross(spec, gamma, x, xs)
    return out[:, 0] if single else out


def corr_derivatives(design, spec: KernelSpec, gamma, R: np.ndarray | None = None) -> list[np.ndarray]:
    """Derivatives ``dR / d log(gamma_l)`` for each input dimension."""
    gamma = _as_gamma(spec, gamma)
    x = _as_design(design, spec.dim)
    if R is None:
        R = _cross(spec, gamma, x, x)
    out = []
    for l in range(spec.dim):
        d = x[:, l][:, None] - x[:, l][None, :]
        fam, a = spec.families[l], spec.alphas[l]
        num = _factor_dlog_gamma(fam, a, d, gamma[l])
        den = _factor(fam, a, d, gamma[l])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / den, 0.0)
        out.append(R * ratio)
    return out


@dataclass
class ScaledCorrelation:
    """Discretized S-GaSP correlation ``R_z = R - R (R + n I / lambda_z)^{-1} R``.

    ``shift`` is ``n / lambda_z``; ``chol_shifted`` factors ``R + shift * I``.
    """

    base: CorrelationMatrix
    lambda_z: float
    Rz: np.ndarray
    shift: float
    chol_shifted: np.ndarray

    def solve_shifted(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.chol_shifted, True), b, check_finite=False)


def scaled_corr(R: CorrelationMatrix, lambda_z: float) -> ScaledCorrelation:
    """Scaled correlation matrix of the discretized S-GaSP."""
    if not np.isfinite(lambda_z) or lambda_z <= 0:
        raise ValueError(f"lambda_z must be positive, got {lambda_z}")
    n = R.n
    shift = n / lambda_z
    A = R.R + shift * np.eye(n)
    chol_a, _ = cholesky_with_jitter(A)
    # R (R + cI)^{-1} R computed through the factor of A.
    half = linalg.solve_triangular(chol_a, R.R, lower=True, check_finite=False)
    Rz = R.R - half.T @ half
    Rz = 0.5 * (Rz + Rz.T)
    return ScaledCorrelation(base=R, lambda_z=float(lambda_z), Rz=Rz, shift=shift, chol_shifted=chol_a)


def scaled_cross(x_a, x_b, lambda_z: float, design, spec: KernelSpec, gamma,
                 R: CorrelationMatrix | None = None) -> np.ndarray:
    """Scaled kernel ``K(x_a, x_b) - r(x_a)^T (R + n I / lambda_z)^{-1} r(x_b)``.

    ``x_a`` and ``x_b`` may be single points or matrices of points; the result
    has shape ``(m_a, m_b)`` for matrices and is a float for two single points.
    """
    if not np.isfinite(lambda_z) or lambda_z <= 0:
        raise ValueError(f"lambda_z must be positive, got {lambda_z}")
    gamma = _as_gamma(spec, gamma)
    x = _as_design(design, spec.dim)
    if R is None:
        R = corr_matrix(x, spec, gamma)
    a_single = np.asarray(x_a).ndim == 1 and (spec.dim > 1 or np.asarray(x_a).size == 1)
    b_single = np.asarray(x_b).ndim == 1 and (spec.dim > 1 or np.asarray(x_b).size == 1)
    xa = _as_design(np.asarray(x_a, dtype=float).reshape(1, -1) if a_single else x_a, spec.dim)
    xb = _as_design(np.asarray(x_b, dtype=float).reshape(1, -1) if b_single else x_b, spec.dim)
    ra = _cross(spec, gamma, x, xa)
    rb = _cross(spec, gamma, x, xb)
    n = x.shape[0]
    A = R.R + (n / lambda_z) * np.eye(n)
    chol_a, _ = cholesky_with_jitter(A)
    la = linalg.solve_triangular(chol_a, ra, lower=True, check_finite=False)
    lb = linalg.solve_triangular(chol_a, rb, lower=True, check_finite=False)
    out = _cross(spec, gamma, xa, xb) - la.T @ lb
    if a_single and b_single:
        return float(out[0, 0])
    return out


def pairwise_distance_range(design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension smallest positive and largest pairwise absolute distances."""
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    lo = np.empty(x.shape[1])
    hi = np.empty(x.shape[1])
    for l in range(x.shape[1]):
        d = np.abs(x[:, l][:, None] - x[:, l][None, :])
        pos = d[d > 0]
        lo[l] = pos.min() if pos.size else 1.0
        hi[l] = pos.max() if pos.size else 1.0
    return lo, hi
