"""Sparse Bayesian identification over stacked heterogeneous experiments.

The marginal-likelihood cost over weights ``w``, block variances ``gamma``
and noise precision ``S`` is minimized by a convex-concave procedure: the
concave log-determinant part is linearized, which turns the weight step into
a reweighted group lasso (solved by ADMM) and the precision step into a
closed-form inverse.

All vectors indexed by stacked position use block-major order (position
``i*C + c`` is basis function i in experiment c).  Weights are returned as
``(N, C)`` arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from hetid.admm import AdmmOptions, admm_group_lasso, group_lasso_objective
from hetid.datamodel import StackedProblem
from hetid.precision import StructuredMatrix

log = logging.getLogger(__name__)

S_STRUCTURES = ("block", "full", "scaled_identity")
THETA_RULES = ("sqrt", "linear")


class SolverError(RuntimeError):
    """Numerical failure inside the identification loop."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class SolverOptions:
    """Options of the outer reweighting loop.

    ``S_structure`` is ``"block"`` (one precision block per experiment),
    ``"full"`` (dense CM x CM) or ``"scaled_identity"`` (S fixed to
    ``I / lam``).  ``theta_rule`` selects the penalty reweighting:
    ``"sqrt"`` gives ``theta_i = sqrt(C alpha_i)``, ``"linear"`` gives
    ``theta_i = C alpha_i``.
    """

    k_max: int = 5
    admm: AdmmOptions = field(default_factory=AdmmOptions)
    jitter: float = 1e-8
    S_structure: str = "block"
    lam: float = 1.0
    stop_tol: float = 1e-6
    theta_rule: str = "sqrt"
    prune_tol: float = 1e-10
    support_tol: float = 1e-6
    refresh_lambda: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be >= 0")
        if self.S_structure not in S_STRUCTURES:
            raise ValueError(f"S_structure must be one of {S_STRUCTURES}")
        if self.theta_rule not in THETA_RULES:
            raise ValueError(f"theta_rule must be one of {THETA_RULES}")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass
class IdentificationResult:
    w: np.ndarray
    support: list
    gamma: np.ndarray
    cost: float
    iterations: int
    Pi: Optional[StructuredMatrix] = None
    cost_history: list = field(default_factory=list)
    alpha: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    S: Optional[StructuredMatrix] = None
    admm_iterations: list = field(default_factory=list)
    gamma_history: list = field(default_factory=list)

    def block_norms(self) -> np.ndarray:
        return np.linalg.norm(self.w, axis=1)

    def to_json(self, names=None) -> dict:
        N = self.w.shape[0]
        names = list(names) if names is not None else [f"f{i + 1}" for i in range(N)]
        Pi = None
        if self.Pi is not None:
            if self.Pi.kind == "scaled_identity":
                Pi = {"structure": "scaled_identity", "scale": self.Pi.data}
            elif self.Pi.kind == "block":
                Pi = {"structure": "block", "diagonal": [np.diag(b).tolist() for b in self.Pi.data]}
            else:
                Pi = {"structure": "full", "diagonal": np.diag(self.Pi.data).tolist()}
        return {
            "blocks": [{"name": names[i], "weights": self.w[i].tolist(), "gamma": float(self.gamma[i])}
                       for i in range(N)],
            "support": [int(i) for i in self.support],
            "support_names": [names[i] for i in self.support],
            "cost": _finite_or_none(self.cost),
            "cost_history": [_finite_or_none(c) for c in self.cost_history],
            "iterations": self.iterations,
            "Pi": Pi,
        }


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


# -- building blocks ----------------------------------------------------------

def _positions(gamma: np.ndarray, C: int) -> np.ndarray:
    return np.repeat(np.asarray(gamma, dtype=float), C)


def _posterior_factor(gamma, S: StructuredMatrix, problem: StackedProblem, H=None):
    """Cholesky factor of ``B = I + G^1/2 H G^1/2`` with ``H = A^T S A``."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite and non-negative")
    H = S.gram(problem.A) if H is None else H
    g = np.sqrt(_positions(gamma, problem.C))
    B = np.eye(H.shape[0]) + g[:, None] * H * g[None, :]
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("posterior system is not positive definite (is S PD?)") from None
    return L, g, H


def cost(w, gamma, S, problem: StackedProblem) -> float:
    """Negative log marginal likelihood (up to constants) with unit potential terms.

    ``-log|S| + log|Gamma| + log|Gamma^-1 + A^T S A| + r^T S r + w^T Gamma^-1 w + N``.
    The two middle log-determinants are evaluated together as
    ``log|I + Gamma^1/2 A^T S A Gamma^1/2|``, which stays finite for pruned
    blocks (``gamma_i = 0``).  A pruned block carrying nonzero weight gives
    ``inf``.
    """
    S = StructuredMatrix.coerce(S, problem.C, problem.M)
    W = np.asarray(w, dtype=float).reshape(problem.N, problem.C)
    gamma = np.asarray(gamma, dtype=float)
    norms2 = np.sum(W**2, axis=1)
    if np.any((gamma == 0) & (norms2 > 0)):
        return math.inf
    logdet_S = S.logdet()
    L, _, _ = _posterior_factor(gamma, S, problem)
    logdet_B = 2.0 * np.sum(np.log(np.diag(L)))
    r = problem.y_stacked - problem.matvec(W)
    pos = gamma > 0
    penalty = float(np.sum(norms2[pos] / gamma[pos]))
    return -logdet_S + logdet_B + S.quad(r) + penalty + float(problem.N)


def posterior_moments(gamma, S, problem: StackedProblem) -> tuple:
    """Posterior mean ``(N, C)`` and covariance ``(NC, NC)`` of the weights."""
    S = StructuredMatrix.coerce(S, problem.C, problem.M)
    L, g, H = _posterior_factor(gamma, S, problem)
    Lg = linalg.solve_triangular(L, np.diag(g), lower=True, check_finite=False)
    Sigma = Lg.T @ Lg
    m = Sigma @ S.weighted_rhs(problem.A, problem.y_stacked)
    return m.reshape(problem.N, problem.C), 0.5 * (Sigma + Sigma.T)


def update_alpha(gamma, S, problem: StackedProblem, H=None) -> np.ndarray:
    """Per-block negative gradient of the concave part, divided by C.

    Per stacked position j of block i the gradient is
    ``1/gamma_i - Sigma_jj / gamma_i**2``; alpha_i is its mean over the
    block's C positions.  The value is computed as ``(1 - (B^-1)_jj)/gamma_i``
    where ``gamma_i H_jj`` is large and as ``(H - H Sigma H)_jj`` otherwise,
    avoiding cancellation in either regime.
    """
    S = StructuredMatrix.coerce(S, problem.C, problem.M)
    gamma = np.asarray(gamma, dtype=float)
    L, g, H = _posterior_factor(gamma, S, problem, H)
    n = H.shape[0]
    Linv = linalg.solve_triangular(L, np.eye(n), lower=True, check_finite=False)
    Binv_diag = np.sum(Linv**2, axis=0)
    X = Linv @ (g[:, None] * H)
    small = np.diag(H) - np.sum(X**2, axis=0)
    gpos = g**2
    hdiag = np.diag(H)
    with np.errstate(divide="ignore", invalid="ignore"):
        large = (1.0 - Binv_diag) / gpos
    per_pos = np.where(gpos * hdiag > 1.0, large, small)
    alpha = per_pos.reshape(problem.N, problem.C).mean(axis=1)
    return np.maximum(alpha, 0.0)


def update_w(theta, S, problem: StackedProblem, options: AdmmOptions = AdmmOptions(), **kwargs) -> np.ndarray:
    """Reweighted group-lasso step; returns ``(N, C)`` weights."""
    return admm_group_lasso(problem, S, theta, options, **kwargs).w


def update_gamma(w, alpha, C: Optional[int] = None, atol: float = 0.0) -> np.ndarray:
    """``gamma_i = ||w_i|| / sqrt(C alpha_i)``; zero for zero blocks."""
    W = np.atleast_2d(np.asarray(w, dtype=float))
    C = W.shape[1] if C is None else C
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0):
        raise ValueError("alpha must be non-negative")
    norms = np.linalg.norm(W, axis=1)
    gamma = np.zeros_like(norms)
    dead = alpha <= atol
    if np.any(dead & (norms > 0)):
        bad = np.flatnonzero(dead & (norms > 0)).tolist()
        raise FloatingPointError(f"alpha vanished on nonzero blocks {bad}: numerical breakdown")
    live = ~dead & (norms > 0)
    gamma[live] = norms[live] / np.sqrt(C * alpha[live])
    return gamma


def update_Lambda(gamma, S, problem: StackedProblem, H=None) -> StructuredMatrix:
    """``Lambda = A (Gamma^-1 + A^T S A)^-1 A^T`` in the layout of ``S``.

    Pruned blocks (``gamma_i = 0``) drop out automatically.  For block and
    scaled-identity precisions only the per-experiment diagonal blocks are
    returned; the off-diagonal blocks vanish identically in that case.
    """
    S = StructuredMatrix.coerce(S, problem.C, problem.M)
    L, g, H = _posterior_factor(gamma, S, problem, H)
    Lg = linalg.solve_triangular(L, np.diag(g), lower=True, check_finite=False)
    Sigma = Lg.T @ Lg
    C, M, _ = problem.A.shape
    if S.kind == "full":
        from hetid.precision import stacked_dense

        Ad = stacked_dense(problem.A)
        Lam = Ad @ Sigma @ Ad.T
        return StructuredMatrix("full", 0.5 * (Lam + Lam.T), C, M)
    blocks = np.empty((C, M, M))
    for c in range(C):
        Sc = Sigma[c::C, c::C]
        Ac = problem.A[c]
        blk = Ac @ Sc @ Ac.T
        blocks[c] = 0.5 * (blk + blk.T)
    return StructuredMatrix("block", blocks, C, M)


def _residual_outer(w, problem: StackedProblem) -> np.ndarray:
    return problem.matvec(w) - problem.y_stacked


def jitter_levels(w, Lambda, problem: StackedProblem, options: SolverOptions = SolverOptions()) -> np.ndarray:
    """Diagonal loads ``jitter * trace/n`` of ``Y + Lambda`` (one per precision block)."""
    C, M = problem.C, problem.M
    Lambda = StructuredMatrix.coerce(Lambda, C, M)
    e = _residual_outer(w, problem)
    if options.S_structure == "full":
        traces = np.array([e @ e + np.trace(Lambda.dense())]) / (C * M)
    else:
        Lam = Lambda.data if Lambda.kind == "block" else _blocks_of(Lambda)
        E = e.reshape(C, M)
        traces = (np.sum(E**2, axis=1) + np.trace(Lam, axis1=1, axis2=2)) / M
    eps = options.jitter * traces
    return np.where((eps > 0) & np.isfinite(eps), eps, options.jitter)


def _jittered_inverse(mat: np.ndarray, eps: float) -> np.ndarray:
    n = mat.shape[0]
    target = 0.5 * (mat + mat.T) + eps * np.eye(n)
    cf = linalg.cho_factor(target, lower=True, check_finite=False)
    inv = linalg.cho_solve(cf, np.eye(n), check_finite=False)
    return 0.5 * (inv + inv.T)


def update_S(w, Lambda, problem: StackedProblem, options: SolverOptions = SolverOptions(),
             S_current=None, eps=None) -> StructuredMatrix:
    """Minimizer of ``Tr(S (Y + Lambda)) - log det S`` in the configured structure.

    ``Y`` is the residual outer product.  The closed form is
    ``(Y + Lambda + eps I)^-1``.  By default ``eps = jitter * trace/n`` (per
    block for the block structure, see :func:`jitter_levels`); passing ``eps``
    explicitly keeps the load fixed, which the outer loop does so that every
    S-step minimizes the same function.  Under ``scaled_identity`` the
    precision stays at ``I / lam``.
    """
    C, M = problem.C, problem.M
    if options.S_structure == "scaled_identity":
        if S_current is not None and S_current.kind == "scaled_identity":
            return S_current
        return StructuredMatrix("scaled_identity", 1.0 / options.lam, C, M)
    Lambda = StructuredMatrix.coerce(Lambda, C, M)
    if eps is None:
        eps = jitter_levels(w, Lambda, problem, options)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (1 if options.S_structure == "full" else C,))
    e = _residual_outer(w, problem)
    if options.S_structure == "full":
        inv = _jittered_inverse(np.outer(e, e) + Lambda.dense(), eps[0])
        return StructuredMatrix("full", inv, C, M)
    Lam = Lambda.data if Lambda.kind == "block" else _blocks_of(Lambda)
    E = e.reshape(C, M)
    out = np.empty((C, M, M))
    for c in range(C):
        out[c] = _jittered_inverse(np.outer(E[c], E[c]) + Lam[c], eps[c])
    return StructuredMatrix("block", out, C, M)


def _blocks_of(mat: StructuredMatrix) -> np.ndarray:
    C, M = mat.C, mat.M
    if mat.kind == "scaled_identity":
        return np.broadcast_to(mat.data * np.eye(M), (C, M, M)).copy()
    d = mat.data
    return np.stack([d[c * M:(c + 1) * M, c * M:(c + 1) * M] for c in range(C)])


def _theta_from_alpha(alpha: np.ndarray, C: int, rule: str) -> np.ndarray:
    if rule == "sqrt":
        return np.sqrt(C * alpha)
    return C * alpha


def _support(W: np.ndarray, tol: float) -> list:
    norms = np.linalg.norm(W, axis=1)
    top = norms.max() if norms.size else 0.0
    if top == 0.0:
        return []
    return [int(i) for i in np.flatnonzero(norms > tol * top)]


# -- outer loop -----------------------------------------------------------------

def identify(problem: StackedProblem, options: SolverOptions = SolverOptions()) -> IdentificationResult:
    """Reweighted identification loop (group lasso, then ``k_max - 1`` reweightings).

    Each outer iteration: w-step (ADMM), gamma-step, pruning of vanished
    blocks, Lambda refresh at the new gamma, S-step, alpha-step, theta-step,
    then cost bookkeeping and the relative-decrease stopping rule.
    """
    C, M, N = problem.A.shape
    opts = options
    if opts.S_structure == "scaled_identity":
        S = StructuredMatrix("scaled_identity", 1.0 / opts.lam, C, M)
    elif opts.S_structure == "full":
        S = StructuredMatrix.identity(C, M, kind="full")
    else:
        S = StructuredMatrix.identity(C, M, kind="block")
    Lam = StructuredMatrix.identity(C, M, kind="full" if opts.S_structure == "full" else "block")
    theta = np.ones(N)
    alpha = theta**2 / C if opts.theta_rule == "sqrt" else theta / C
    active = np.ones(N, dtype=bool)
    W = np.zeros((N, C))
    gamma = np.zeros(N)
    history: list = []
    admm_iters: list = []
    gammas: list = []
    H = S.gram(problem.A)
    b = S.weighted_rhs(problem.A, problem.y_stacked)
    eps = None

    k = 0
    for k in range(1, opts.k_max + 1):
        try:
            state = admm_group_lasso(problem, S, theta, opts.admm, active=active,
                                     w0=W if k > 1 else None, gram=(H, b))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"w-update failed: {exc}", k) from exc
        W_new = state.w
        admm_iters.append(state.iterations)
        if k > 1:
            # inexact inner solves must not undo the majorization step
            if group_lasso_objective(problem, S, theta, W_new) > group_lasso_objective(problem, S, theta, W):
                W_new = W
        W = W_new

        try:
            gamma = update_gamma(W, alpha, C)
        except FloatingPointError as exc:
            raise SolverError(str(exc), k) from exc
        gmax = gamma.max() if gamma.size else 0.0
        newly_pruned = active & (gamma <= opts.prune_tol * gmax)
        if np.any(newly_pruned):
            active &= ~newly_pruned
            gamma[~active] = 0.0
            W = W.copy()
            W[~active] = 0.0

        if opts.S_structure != "scaled_identity":
            if opts.refresh_lambda:
                Lam = update_Lambda(gamma, S, problem, H)
            if eps is None:
                # frozen after the first S-step: a moving diagonal load would
                # change the majorized function between iterations
                eps = jitter_levels(W, Lam, problem, opts)
            S = update_S(W, Lam, problem, opts, eps=eps)
            H = S.gram(problem.A)
            b = S.weighted_rhs(problem.A, problem.y_stacked)

        alpha = update_alpha(gamma, S, problem, H)
        theta = _theta_from_alpha(alpha, C, opts.theta_rule)
        theta[~active] = 0.0
        if not opts.refresh_lambda and opts.S_structure != "scaled_identity":
            Lam = update_Lambda(gamma, S, problem, H)

        current = cost(W, gamma, S, problem)
        history.append(float(current))
        gammas.append(gamma.copy())
        if not math.isfinite(current):
            raise SolverError("cost is not finite", k)
        if len(history) > 1:
            prev = history[-2]
            if prev - current < opts.stop_tol * abs(prev):
                break

    return IdentificationResult(
        w=W,
        support=_support(W, opts.support_tol),
        gamma=gamma,
        cost=history[-1],
        iterations=k,
        Pi=S.inverse(),
        cost_history=history,
        alpha=alpha,
        theta=theta,
        S=S,
        admm_iterations=admm_iters,
        gamma_history=gammas,
    )


def group_lasso_baseline(problem: StackedProblem, lam: float = 1.0,
                         admm: AdmmOptions = AdmmOptions(), support_tol: float = 1e-6) -> IdentificationResult:
    """Single unit-weight group-lasso step with ``S = I / lam``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    C, M, N = problem.A.shape
    S = StructuredMatrix("scaled_identity", 1.0 / lam, C, M)
    theta = np.ones(N)
    state = admm_group_lasso(problem, S, theta, admm)
    W = state.w
    gamma = update_gamma(W, np.full(N, 1.0 / C), C)
    return IdentificationResult(
        w=W,
        support=_support(W, support_tol),
        gamma=gamma,
        cost=cost(W, gamma, S, problem),
        iterations=1,
        Pi=S.inverse(),
        cost_history=[],
        theta=theta,
        S=S,
        admm_iterations=[state.iterations],
    )


def with_options(options: SolverOptions, **changes) -> SolverOptions:
    return replace(options, **changes)
