"""ADMM for the weighted group-lasso subproblem.

Solves::

    min_w  1/2 (y - A w)^T S (y - A w) + sum_i theta_i ||w_i||_2

over the stacked weights (block ``w_i`` holds the C per-experiment weights of
basis function i), using the split ``theta_i w_i = z_i`` so that every
z-update is a block soft threshold at ``1/rho``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from hetid.datamodel import StackedProblem
from hetid.precision import StructuredMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmOptions:
    rho: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iters: int = 5000
    adaptive_rho: bool = False

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class AdmmState:
    """Final iterate of an ADMM run.

    ``w`` is the returned primal solution as an ``(N, C)`` array.  ``z``, ``u``
    and ``dw`` (the scaled image ``theta_i w_i``) live in the split space.
    """

    w: np.ndarray
    z: np.ndarray
    u: np.ndarray
    dw: np.ndarray
    rho: float
    iterations: int = 0
    converged: bool = False
    objective: float = np.nan
    r_norms: list = field(default_factory=list)
    s_norms: list = field(default_factory=list)


def soft_threshold_vector(a, kappa: float) -> np.ndarray:
    """Block soft threshold ``(1 - kappa/||a||)_+ a``, with ``S(0) = 0``."""
    a = np.asarray(a, dtype=float)
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    norm = np.linalg.norm(a)
    if norm <= kappa or norm == 0.0:
        return np.zeros_like(a)
    return (1.0 - kappa / norm) * a


def _shrink_rows(V: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > kappa, 1.0 - kappa / norms, 0.0)
    return factor[:, None] * V


def tolerances(state: AdmmState, options: AdmmOptions, n: Optional[int] = None) -> tuple:
    """``(eps_primal, eps_dual)`` from the absolute-plus-relative rule."""
    n = state.z.size if n is None else n
    root = np.sqrt(max(n, 1)) * options.eps_abs
    eps_primal = root + options.eps_rel * max(np.linalg.norm(state.dw), np.linalg.norm(state.z))
    eps_dual = root + options.eps_rel * state.rho * np.linalg.norm(state.u)
    return eps_primal, eps_dual


def admm_converged(r_norm: float, s_norm: float, state: AdmmState, options: AdmmOptions,
                   n: Optional[int] = None) -> bool:
    eps_primal, eps_dual = tolerances(state, options, n)
    return bool(r_norm <= eps_primal and s_norm <= eps_dual)


def group_lasso_objective(problem: StackedProblem, S, theta, w) -> float:
    """``1/2 r^T S r + sum_i theta_i ||w_i||`` with ``r = y - A w``."""
    S = StructuredMatrix.coerce(S, problem.C, problem.M)
    W = np.asarray(w, dtype=float).reshape(problem.N, problem.C)
    r = problem.y_stacked - problem.matvec(W)
    return 0.5 * S.quad(r) + float(np.dot(np.asarray(theta, dtype=float), np.linalg.norm(W, axis=1)))


def _project(V: np.ndarray, signs: np.ndarray) -> np.ndarray:
    out = V.copy()
    out[signs == 1] = np.maximum(out[signs == 1], 0.0)
    out[signs == -1] = np.minimum(out[signs == -1], 0.0)
    return out


def _factor(K: np.ndarray):
    jitter = 0.0
    scale = max(np.trace(K) / max(K.shape[0], 1), 1e-300)
    for _ in range(12):
        try:
            return linalg.cho_factor(K + jitter * np.eye(K.shape[0]), check_finite=False), jitter
        except linalg.LinAlgError:
            jitter = scale * 1e-12 if jitter == 0.0 else jitter * 100.0
    raise np.linalg.LinAlgError("ADMM linear system is not positive definite")


def admm_group_lasso(problem: StackedProblem, S, theta, options: AdmmOptions = AdmmOptions(),
                     active=None, w0=None, gram=None, callback: Optional[Callable] = None) -> AdmmState:
    """Weighted group lasso by scaled-dual ADMM with a cached factorization.

    Parameters
    ----------
    problem : StackedProblem
    S : precision (scalar, ``(C, M, M)`` blocks, dense, or StructuredMatrix)
    theta : (N,) penalty weights, ``theta >= 0``
    options : AdmmOptions
    active : optional boolean mask of blocks; inactive blocks are fixed at 0
    w0 : optional ``(N, C)`` warm start
    gram : optional precomputed ``(H, b)`` with ``H = A^T S A`` and ``b = A^T S y``
    callback : called as ``callback(iteration, w, z, u_prev, dw)`` after each z-update

    Notes
    -----
    Blocks with ``theta_i = 0`` and no sign constraint are left out of the
    split and solved exactly in the w-update.  A zero-penalty block that is
    sign constrained keeps a unit split with threshold zero, so the projection
    still applies.  For split blocks the returned weights are ``z_i / d_i``,
    which are exactly sparse and exactly feasible.
    """
    C, N = problem.C, problem.N
    S = StructuredMatrix.coerce(S, C, problem.M)
    theta = np.asarray(theta, dtype=float).reshape(N)
    if np.any(theta < 0) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite and non-negative")
    active = np.ones(N, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    signs_all = np.array([{"free": 0, "nonneg": 1, "nonpos": -1}[s] for s in problem.sign_constraints])

    if gram is None:
        H, b = S.gram(problem.A), S.weighted_rhs(problem.A, problem.y_stacked)
    else:
        H, b = gram
    idx_blocks = np.flatnonzero(active)
    n_act = idx_blocks.size
    W_out = np.zeros((N, C))
    if n_act == 0:
        empty = np.zeros((0, C))
        return AdmmState(W_out, empty, empty, empty, options.rho, 0, True,
                         group_lasso_objective(problem, S, theta, W_out))
    cols = (idx_blocks[:, None] * C + np.arange(C)).reshape(-1)
    H = H[np.ix_(cols, cols)]
    b = b[cols]
    th = theta[idx_blocks]
    signs = signs_all[idx_blocks]

    d = np.where(th > 0, th, np.where(signs != 0, 1.0, 0.0))
    split = d > 0
    kappa_unit = np.where(th > 0, 1.0, 0.0)
    D = np.repeat(d, C)
    n_split = int(split.sum()) * C

    rho = options.rho
    factor, _ = _factor(H + rho * np.diag(D**2))

    if w0 is not None:
        w = np.asarray(w0, dtype=float).reshape(N, C)[idx_blocks].reshape(-1)
    else:
        w = np.zeros(n_act * C)
    Z = (D * w).reshape(n_act, C)
    Z[split] = _shrink_rows(_project(Z[split], signs[split]), np.zeros(int(split.sum())))
    U = np.zeros((n_act, C))
    state = AdmmState(W_out, Z, U, Z.copy(), rho)

    def objective_of(wv):
        Wf = wv.reshape(n_act, C)
        return 0.5 * float(wv @ (H @ wv)) - float(b @ wv) + float(np.dot(th, np.linalg.norm(Wf, axis=1)))

    def candidate(wv, Zc):
        out = wv.reshape(n_act, C).copy()
        out[split] = Zc[split] / d[split, None]
        return out.reshape(-1)

    best, best_obj = None, np.inf
    mu, tau = 10.0, 2.0
    for it in range(1, options.max_iters + 1):
        w = linalg.cho_solve(factor, b + rho * D * (Z - U).reshape(-1), check_finite=False)
        DW = (D * w).reshape(n_act, C)
        Z_old = Z
        U_prev = U
        V = DW + U
        Z = np.zeros_like(V)
        if split.any():
            Z[split] = _shrink_rows(_project(V[split], signs[split]), kappa_unit[split] / rho)
        U = U + DW - Z
        if callback is not None:
            callback(it, w.reshape(n_act, C).copy(), Z.copy(), U_prev.copy(), DW.copy())

        r_norm = float(np.linalg.norm(DW - Z))
        s_norm = float(rho * np.linalg.norm(Z - Z_old))
        state.r_norms.append(r_norm)
        state.s_norms.append(s_norm)
        state.z, state.u, state.dw, state.rho, state.iterations = Z, U, DW, rho, it
        if admm_converged(r_norm, s_norm, state, options, n_split):
            state.converged = True
            break
        if it % 25 == 0:
            cand = candidate(w, Z)
            obj = objective_of(cand)
            if obj < best_obj:
                best, best_obj = cand, obj
        if options.adaptive_rho and it % 10 == 0:
            if r_norm > mu * s_norm:
                new_rho = rho * tau
            elif s_norm > mu * r_norm:
                new_rho = rho / tau
            else:
                new_rho = rho
            if new_rho != rho:
                U = U * (rho / new_rho)
                rho = new_rho
                factor, _ = _factor(H + rho * np.diag(D**2))

    final = candidate(w, Z)
    if not state.converged:
        obj = objective_of(final)
        if best is not None and best_obj < obj:
            final = best
        log.warning("ADMM stopped after %d iterations (r=%.3g, s=%.3g)",
                    state.iterations, state.r_norms[-1], state.s_norms[-1])
    W_out[idx_blocks] = final.reshape(n_act, C)
    state.w = W_out
    state.objective = group_lasso_objective(problem, S, theta, W_out)
    return state
