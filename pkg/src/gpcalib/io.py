"""CSV and JSON readers and writers used by the command line.

Matrices are plain RFC-4180 CSV with an optional header row.  Floats are
written with ``repr``, which round-trips every double exactly (up to 17
significant digits).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mcmc import PosteriorSamples

__all__ = [
    "read_matrix",
    "write_matrix",
    "read_observations",
    "write_long_observations",
    "read_posterior_csv",
    "write_json",
]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if rows and not all(_is_number(c) for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    return header, rows


def read_matrix(path, return_header: bool = False):
    """Read a numeric CSV into a 2-d float array; a non-numeric first row is a header."""
    header, rows = _read_rows(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: rows have different lengths {sorted(widths)}")
    try:
        arr = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return (arr, header) if return_header else arr


def write_matrix(path, arr, header=None) -> None:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def read_observations(path, n: int | None = None):
    """Field observations in wide or long format.

    Wide: ``n`` rows and ``k`` replicate columns; one column gives a vector.
    Long: header ``input_id,value`` with 1-based ids, giving ragged replicates.
    """
    header, rows = _read_rows(path)
    if header is not None and [h.lower() for h in header[:2]] == ["input_id", "value"]:
        ids = np.array([int(float(r[0])) for r in rows])
        vals = np.array([float(r[1]) for r in rows])
        m = int(ids.max()) if n is None else n
        if ids.min() < 1 or ids.max() > m:
            raise ValueError(f"{path}: input_id outside 1..{m}")
        groups = [vals[ids == i] for i in range(1, m + 1)]
        if any(g.size == 0 for g in groups):
            raise ValueError(f"{path}: some inputs have no observations")
        return groups
    arr = read_matrix(path)
    return arr[:, 0] if arr.shape[1] == 1 else arr


def write_long_observations(path, groups) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "value"])
        for i, g in enumerate(groups, start=1):
            for v in np.atleast_1d(g):
                w.writerow([i, repr(float(v))])


def read_posterior_csv(path, discrepancy: str, p_x: int, n_iterations: int | None = None,
                       lambda_z=None) -> PosteriorSamples:
    """Rebuild ``PosteriorSamples`` from a chain file; acceptance indices are not stored."""
    arr, header = read_matrix(path, return_header=True)
    if header is None:
        raise ValueError(f"{path}: chain file needs a header row")
    p_theta = sum(h.startswith("theta_") and not h.startswith("theta_m_") for h in header)
    q = sum(h.startswith("theta_m_") for h in header)
    return PosteriorSamples(
        samples=arr,
        columns=header,
        discrepancy=discrepancy,
        p_theta=p_theta,
        p_x=p_x,
        q=q,
        accept_theta=np.array([], dtype=int),
        accept_kernel=np.array([], dtype=int),
        n_iterations=n_iterations or arr.shape[0],
        lambda_z=None if lambda_z is None else np.asarray(lambda_z, dtype=float),
    )


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
