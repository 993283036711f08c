"""Dense linear-algebra kernels shared by the estimators.

The truncated SVD is computed from the eigendecomposition of the smaller Gram
matrix, which is what APC does in practice and costs O(min(T, N)^3) once the
Gram matrix is formed.  Signs are normalized so factorizations are
reproducible run to run.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidInput, RankError, SingularDesign

#: singular values below ``RANK_RTOL * D[0]`` count as zero
RANK_RTOL = 1e-12
#: largest condition number of X'X accepted by :func:`ols`
OLS_MAX_COND = 1e12


@dataclass(frozen=True)
class SvdResult:
    """Top-k singular triplets: ``A ~ U @ diag(D) @ V.T``."""

    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.D.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.T

    def numerical_rank(self, rtol: float = RANK_RTOL) -> int:
        if self.k == 0 or self.D[0] <= 0:
            return 0
        return int(np.sum(self.D > rtol * self.D[0]))


def _complete_basis(good: np.ndarray, m: int, n_missing: int) -> np.ndarray:
    """Orthonormal columns spanning part of the complement of ``good``."""
    if good.shape[1] == 0:
        return np.eye(m)[:, :n_missing]
    comp = scipy.linalg.null_space(good.T)
    return comp[:, :n_missing]


def thin_svd(A: np.ndarray, k: int) -> SvdResult:
    """Top-``k`` singular triplets of ``A`` with normalized signs.

    Parameters
    ----------
    A : (T, N) array
        Finite real matrix.
    k : int
        Number of triplets, ``1 <= k <= min(T, N)``.

    Raises
    ------
    InvalidInput
        If ``A`` has non-finite entries or is not two-dimensional.
    RankError
        If ``k`` is out of range.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise InvalidInput(f"expected a 2-d matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInput("matrix has non-finite entries")
    T, N = A.shape
    m = min(T, N)
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= m:
        raise RankError(f"rank {k!r} outside [1, {m}]")
    k = int(k)

    wide = T <= N
    G = A @ A.T if wide else A.T @ A
    if k < m:
        w, Q = scipy.linalg.eigh(G, subset_by_index=[m - k, m - 1])
    else:
        w, Q = scipy.linalg.eigh(G)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    Q = Q[:, order]
    D = np.sqrt(np.clip(w, 0.0, None))

    small = D.shape[0] if D[0] <= 0 else D.shape[0] - int(np.sum(D > RANK_RTOL * D[0]))
    n_good = D.shape[0] - small
    other = (A.T @ Q[:, :n_good]) / D[:n_good] if wide else (A @ Q[:, :n_good]) / D[:n_good]
    if small:
        D = D.copy()
        D[n_good:] = 0.0
        other = np.hstack([other, _complete_basis(other, N if wide else T, small)])
    U, V = (Q, other) if wide else (other, Q)
    return sign_normalize(SvdResult(U=U, D=D, V=V))


def sign_normalize(S: SvdResult) -> SvdResult:
    """Flip each triplet so the largest-magnitude entry of ``U[:, j]`` is positive.

    On ties the first index wins.  The reconstruction is unchanged and the map
    is idempotent.
    """
    U = np.array(S.U, dtype=float, copy=True)
    V = np.array(S.V, dtype=float, copy=True)
    if U.size:
        lead = np.argmax(np.abs(U), axis=0)
        flip = U[lead, np.arange(U.shape[1])] < 0
        U[:, flip] *= -1.0
        V[:, flip] *= -1.0
    return SvdResult(U=U, D=np.array(S.D, dtype=float, copy=True), V=V)


def ols(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares coefficients ``B = (X'X)^{-1} X'Y``.

    ``Y`` may be a vector or an ``n x p`` matrix; the result has matching
    trailing shape (``q`` or ``q x p``).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, q = X.shape
    if Y.shape[0] != n:
        raise InvalidInput(f"row mismatch: Y has {Y.shape[0]}, X has {n}")
    if n < q:
        raise SingularDesign(f"{n} observations for {q} regressors")
    XtX = X.T @ X
    if not np.all(np.isfinite(XtX)) or np.linalg.cond(XtX) >= OLS_MAX_COND:
        raise SingularDesign("X'X is singular or ill-conditioned")
    B, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return B
