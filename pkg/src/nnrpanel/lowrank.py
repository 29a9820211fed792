"""SVD utilities: singular value thresholding, nuclear norm, the P/M
projections and normalized factorization of a low-rank matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .io import register_record

GRAM_TOL = 1e-8


def _check_finite(A):
    A = np.asarray(A, dtype=float)
    if not np.isfinite(A).all():
        raise ValidationError("matrix has non-finite entries")
    return A


def svd(A):
    """Thin SVD with singular values in non-increasing order."""
    return np.linalg.svd(_check_finite(A), full_matrices=False)


def singular_values(A) -> np.ndarray:
    A = _check_finite(A)
    if A.size == 0:
        return np.zeros(0)
    return np.linalg.svd(A, compute_uv=False)


def nuclear_norm(A) -> float:
    return float(singular_values(A).sum())


def soft_threshold(A, iota, return_sv=False):
    """Prox operator of ``iota * ||.||_*``: shrink every singular value by iota.

    With ``return_sv`` also returns the singular values of ``A`` before shrinkage.
    """
    if iota < 0:
        raise ValidationError("threshold must be non-negative")
    U, s, Vt = svd(A)
    shrunk = np.maximum(s - iota, 0.0)
    k = int(np.count_nonzero(shrunk))
    out = (U[:, :k] * shrunk[:k]) @ Vt[:k]
    if return_sv:
        return out, s
    return out


def project_PM(Delta, U0, V0):
    """Split Delta into its component in span(U0) x span(V0) and the remainder."""
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    V0 = np.atleast_2d(np.asarray(V0, dtype=float))
    for name, B in (("U0", U0), ("V0", V0)):
        dev = np.abs(B.T @ B - np.eye(B.shape[1])).max(initial=0.0)
        if dev > GRAM_TOL:
            raise ValidationError(f"{name} columns are not orthonormal (Gram deviation {dev:.2e})")
    Delta = np.asarray(Delta, dtype=float)
    P = U0 @ (U0.T @ Delta @ V0) @ V0.T
    return P, Delta - P


def _as_columns(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


@register_record("factors")
@dataclass
class FactorDecomposition:
    """Loadings (N x r) and factors (T x r) with F'F/T = I and Lambda'Lambda/N
    diagonal, non-increasing."""

    Lambda: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        self.Lambda = _as_columns(self.Lambda)
        self.F = _as_columns(self.F)
        if self.Lambda.shape[1] != self.F.shape[1]:
            raise ValidationError("Lambda and F need the same number of columns")

    @property
    def r(self) -> int:
        return self.F.shape[1]

    @property
    def N(self) -> int:
        return self.Lambda.shape[0]

    @property
    def T(self) -> int:
        return self.F.shape[0]

    @property
    def Pi(self) -> np.ndarray:
        return self.Lambda @ self.F.T

    def normalization_error(self) -> dict:
        """Deviations from the normalization; all zero for an exact certificate."""
        r = self.r
        if r == 0:
            return {"ff_identity": 0.0, "ll_offdiag": 0.0, "ll_order": 0.0}
        FF = self.F.T @ self.F / self.T
        LL = self.Lambda.T @ self.Lambda / self.N
        d = np.diag(LL)
        # off-diagonals relative to the column scales (absolute when those are <= 1),
        # since rounding error grows with the size of Lambda
        scale = np.maximum(np.sqrt(np.abs(np.outer(d, d))), 1.0)
        off = (LL - np.diag(d)) / scale
        return {
            "ff_identity": float(np.abs(FF - np.eye(r)).max()),
            "ll_offdiag": float(np.abs(off).max()),
            "ll_order": float(max(np.max(np.diff(d), initial=0.0), 0.0)),
        }

    def is_normalized(self, tol=1e-8) -> bool:
        return all(v < tol for v in self.normalization_error().values())

    def flip(self, signs) -> "FactorDecomposition":
        signs = np.asarray(signs, dtype=float)
        return FactorDecomposition(self.Lambda * signs, self.F * signs)

    @classmethod
    def from_dict(cls, d):
        N, T = d.get("N", len(d["Lambda"])), d.get("T", len(d["F"]))
        r = d.get("r", None)
        L = np.array(d["Lambda"], dtype=float)
        F = np.array(d["F"], dtype=float)
        if r == 0:
            L, F = np.zeros((N, 0)), np.zeros((T, 0))
        return cls(L, F)

    @classmethod
    def empty(cls, N, T):
        return cls(np.zeros((N, 0)), np.zeros((T, 0)))


def factorize_rank_r(Pi, r: int) -> FactorDecomposition:
    """Best rank-r approximation of Pi written as Lambda F' with
    F'F/T = I_r and Lambda'Lambda/N = diag(sigma^2)/(N T).

    Sign convention: the largest-magnitude entry of every column of F is positive.
    """
    Pi = np.asarray(Pi, dtype=float)
    N, T = Pi.shape
    if r < 0 or r > min(N, T):
        raise ValidationError(f"rank {r} outside [0, {min(N, T)}]")
    if r == 0:
        return FactorDecomposition.empty(N, T)
    U, s, Vt = svd(Pi)
    V = Vt[:r].T
    signs = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(r)])
    signs[signs == 0] = 1.0
    F = np.sqrt(T) * V * signs
    Lam = U[:, :r] * (s[:r] / np.sqrt(T)) * signs
    return FactorDecomposition(Lam, F)


def align_sign(F_hat, F_ref) -> np.ndarray:
    """Diagonal +-1 matrix sgn(F_hat' F_ref); sgn(0) = +1."""
    d = np.einsum("tk,tk->k", np.asarray(F_hat, float), np.asarray(F_ref, float))
    return np.diag(np.where(d >= 0, 1.0, -1.0))
