"""Structured CM x CM matrices (noise precision S and its companion Lambda).

Three layouts are supported: a full dense matrix, per-experiment diagonal
blocks stored as ``(C, M, M)``, and a scaled identity stored as a scalar.
Everything the solvers need from ``S`` (the Gram matrix ``A^T S A``, the
weighted residual norm, the log-determinant) is computed here without ever
forming the dense stacked dictionary unless ``S`` itself is full.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

KINDS = ("full", "block", "scaled_identity")


@dataclass(frozen=True)
class StructuredMatrix:
    kind: str
    data: object
    C: int
    M: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown structure {self.kind!r}")
        C, M = self.C, self.M
        if self.kind == "full":
            d = np.asarray(self.data, dtype=float)
            if d.shape != (C * M, C * M):
                raise ValueError(f"full matrix must be {C * M}x{C * M}, got {d.shape}")
        elif self.kind == "block":
            d = np.asarray(self.data, dtype=float)
            if d.shape != (C, M, M):
                raise ValueError(f"block matrix must have shape {(C, M, M)}, got {d.shape}")
        else:
            d = float(self.data)
        object.__setattr__(self, "data", d)

    @classmethod
    def identity(cls, C: int, M: int, scale: float = 1.0, kind: str = "block") -> "StructuredMatrix":
        if kind == "scaled_identity":
            return cls(kind, scale, C, M)
        if kind == "block":
            return cls(kind, np.broadcast_to(scale * np.eye(M), (C, M, M)).copy(), C, M)
        return cls(kind, scale * np.eye(C * M), C, M)

    @classmethod
    def coerce(cls, S, C: int, M: int) -> "StructuredMatrix":
        """Accept a StructuredMatrix, a scalar (scaled identity), a (C, M, M) or a dense array."""
        if isinstance(S, StructuredMatrix):
            return S
        if np.ndim(S) == 0:
            return cls("scaled_identity", float(S), C, M)
        S = np.asarray(S, dtype=float)
        return cls("block" if S.ndim == 3 else "full", S, C, M)

    @property
    def n(self) -> int:
        return self.C * self.M

    def dense(self) -> np.ndarray:
        if self.kind == "full":
            return self.data.copy()
        if self.kind == "block":
            return linalg.block_diag(*self.data)
        return self.data * np.eye(self.n)

    def apply(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float).reshape(-1)
        if self.kind == "full":
            return self.data @ r
        if self.kind == "block":
            return np.einsum("cij,cj->ci", self.data, r.reshape(self.C, self.M)).reshape(-1)
        return self.data * r

    def quad(self, r) -> float:
        r = np.asarray(r, dtype=float).reshape(-1)
        return float(r @ self.apply(r))

    def logdet(self) -> float:
        """log-determinant; raises ``LinAlgError`` unless positive definite."""
        if self.kind == "scaled_identity":
            if self.data <= 0:
                raise np.linalg.LinAlgError("scaled identity with non-positive scale")
            return self.n * np.log(self.data)
        mats = [self.data] if self.kind == "full" else list(self.data)
        total = 0.0
        for mat in mats:
            L = np.linalg.cholesky(0.5 * (mat + mat.T))
            total += 2.0 * np.sum(np.log(np.diag(L)))
        return total

    def inverse(self) -> "StructuredMatrix":
        if self.kind == "scaled_identity":
            return StructuredMatrix(self.kind, 1.0 / self.data, self.C, self.M)
        if self.kind == "block":
            return StructuredMatrix(self.kind, np.linalg.inv(self.data), self.C, self.M)
        return StructuredMatrix(self.kind, np.linalg.inv(self.data), self.C, self.M)

    def gram(self, A: np.ndarray) -> np.ndarray:
        """``A^T S A`` for a ``(C, M, N)`` dictionary, as NC x NC in stacked (block-major) order."""
        C, M, N = A.shape
        H = np.zeros((N * C, N * C))
        if self.kind == "full":
            Ad = stacked_dense(A)
            return Ad.T @ self.data @ Ad
        if self.kind == "block":
            G = np.einsum("cmi,cmk,ckj->cij", A, self.data, A)
        else:
            G = self.data * np.einsum("cmi,cmj->cij", A, A)
        for c in range(C):
            H[c::C, c::C] = G[c]
        return H

    def weighted_rhs(self, A: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``A^T S y`` as a flat NC vector in stacked order."""
        C, M, N = A.shape
        Sy = self.apply(y).reshape(C, M)
        return np.einsum("cmn,cm->nc", A, Sy).reshape(-1)


def stacked_dense(A: np.ndarray) -> np.ndarray:
    C, M, N = A.shape
    out = np.zeros((C * M, N * C))
    for c in range(C):
        out[c * M:(c + 1) * M, c::C] = A[c]
    return out
