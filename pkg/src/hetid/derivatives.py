"""Weighted symmetric-difference derivative estimates on uniform grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hetid.datamodel import TimeSeriesExperiment


@dataclass(frozen=True)
class DifferenceSpec:
    """Half-window ``k``; the first and last ``k`` samples are trimmed."""

    k: int = 1
    boundary_policy: str = "trim"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.boundary_policy != "trim":
            raise ValueError("only the 'trim' boundary policy is supported")


def lpr_weights(k: int) -> np.ndarray:
    """Weights ``6 j^2 / (k (k+1) (2k+1))`` for ``j = 1..k``; they sum to one."""
    if k < 1:
        raise ValueError("k must be >= 1")
    j = np.arange(1, k + 1, dtype=float)
    return 6.0 * j**2 / (k * (k + 1) * (2 * k + 1))


def _check_uniform(times: np.ndarray, rtol: float = 1e-9) -> None:
    dt = np.diff(times)
    if np.any(dt <= 0):
        raise ValueError("times must be strictly increasing")
    if np.max(np.abs(dt - dt.mean())) > rtol * max(abs(dt.mean()), 1.0):
        raise ValueError("derivative estimation requires a uniform sampling grid")


def estimate_derivative(series, times, spec: DifferenceSpec = DifferenceSpec()) -> tuple:
    """Estimate first derivatives at the interior samples.

    Parameters
    ----------
    series : array, shape (M,) or (M, d)
        Samples on a uniform grid; columns are differentiated independently.
    times : array, shape (M,)
    spec : DifferenceSpec

    Returns
    -------
    deriv : array, shape (M - 2k,) or (M - 2k, d)
    index : int array, shape (M - 2k,)
        Zero-based sample indices ``k .. M-k-1`` the estimates belong to.
    """
    y = np.asarray(series, dtype=float)
    t = np.asarray(times, dtype=float)
    k = spec.k
    M = len(t)
    if y.shape[0] != M:
        raise ValueError("series and times lengths differ")
    if M < 2 * k + 1:
        raise ValueError(f"series too short: need at least {2 * k + 1} samples for k={k}, got {M}")
    _check_uniform(t)
    weights = lpr_weights(k)
    index = np.arange(k, M - k)
    out = np.zeros((len(index),) + y.shape[1:])
    for j, wj in enumerate(weights, start=1):
        num = y[index + j] - y[index - j]
        den = t[index + j] - t[index - j]
        out += wj * (num / den.reshape((-1,) + (1,) * (y.ndim - 1)))
    return out, index


def differentiate_experiment(exp: TimeSeriesExperiment, spec: DifferenceSpec = DifferenceSpec()) -> tuple:
    """All state derivatives of one experiment: ``(deriv (M-2k, n_x), index)``."""
    return estimate_derivative(exp.states, exp.times, spec)


def derivative_csv(exp: TimeSeriesExperiment, spec: DifferenceSpec = DifferenceSpec()) -> str:
    """CSV text ``t, dx1, ...`` with the retained index range in a comment header."""
    deriv, index = differentiate_experiment(exp, spec)
    lines = [f"# experiment={exp.id} k={spec.k} rows={int(index[0])}..{int(index[-1])}",
             ",".join(["t"] + [f"dx{j + 1}" for j in range(exp.n_x)])]
    for row, m in enumerate(index):
        lines.append(",".join(repr(float(v)) for v in (exp.times[m], *deriv[row])))
    return "\n".join(lines) + "\n"
