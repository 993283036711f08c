"""Asymptotic principal components on a complete matrix.

``estimate_apc`` returns ``F = sqrt(T) U_r`` and ``Lambda = sqrt(N) V_r D_r``
from the SVD of ``Z = X / sqrt(T N)``, so that ``F'F/T = I`` and
``Lambda'Lambda`` is diagonal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, MaskedInput, RankError
from .numerics import RANK_RTOL, SvdResult, thin_svd


class RankDeficiencyWarning(UserWarning):
    """The r-th singular value is numerically zero."""


@dataclass(frozen=True, eq=False)
class FactorModel:
    F: np.ndarray
    Lambda: np.ndarray
    D: np.ndarray
    r: int
    T: int
    N: int
    rank_deficient: bool = False
    gamma: float = 0.0

    def common(self) -> np.ndarray:
        return self.F @ self.Lambda.T


def _as_complete(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidInput(f"expected a 2-d matrix, got shape {X.shape}")
    if np.isnan(X).any():
        raise MaskedInput("APC needs a complete matrix; found missing entries")
    return X


def _check_rank(r, T: int, N: int) -> int:
    if isinstance(r, bool) or not isinstance(r, (int, np.integer)) or not 1 <= r <= min(T, N):
        raise RankError(f"rank {r!r} outside [1, {min(T, N)}]")
    return int(r)


def _svd_of_z(X: np.ndarray, r: int) -> SvdResult:
    T, N = X.shape
    return thin_svd(X / np.sqrt(T * N), r)


def _model(S: SvdResult, D_used: np.ndarray, T: int, N: int, gamma: float = 0.0) -> FactorModel:
    F = np.sqrt(T) * S.U
    Lam = np.sqrt(N) * S.V * D_used
    deficient = S.numerical_rank(RANK_RTOL) < S.k
    return FactorModel(F=F, Lambda=Lam, D=S.D, r=S.k, T=T, N=N, rank_deficient=deficient, gamma=gamma)


def estimate_apc(X, r: int) -> FactorModel:
    """Rank-``r`` APC factors and loadings of a complete ``T x N`` matrix.

    A numerically zero ``D[r-1]`` triggers a :class:`RankDeficiencyWarning`
    rather than an error; the common component is still the best rank-``r``
    approximation.
    """
    X = _as_complete(X)
    T, N = X.shape
    r = _check_rank(r, T, N)
    S = _svd_of_z(X, r)
    fm = _model(S, S.D, T, N)
    if fm.rank_deficient:
        warnings.warn(
            f"singular value {r} is below {RANK_RTOL:g} x the largest; matrix rank < {r}",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    return fm


def _penalty(criterion: str, k: np.ndarray, T: int, N: int) -> np.ndarray:
    NT, NT1 = N * T, N + T
    if criterion == "icp1":
        return k * (NT1 / NT) * np.log(NT / NT1)
    if criterion == "icp2":
        return k * (NT1 / NT) * np.log(min(N, T))
    if criterion == "icp3":
        return k * np.log(min(N, T)) / min(N, T)
    raise InvalidInput(f"unknown criterion {criterion!r}; use icp1, icp2 or icp3")


def ic_values(X, r_max: int, criterion: str = "icp2") -> tuple[np.ndarray, np.ndarray]:
    """Residual variances ``V(k)`` and criterion values for ``k = 1..r_max``."""
    X = _as_complete(X)
    T, N = X.shape
    if isinstance(r_max, bool) or not isinstance(r_max, (int, np.integer)) or not 1 <= r_max <= min(T, N) // 2:
        raise RankError(f"r_max {r_max!r} must lie in [1, min(T, N)/2 = {min(T, N) // 2}]")
    S = _svd_of_z(X, int(r_max))
    Z = X / np.sqrt(T * N)
    V = np.empty(r_max)
    for j in range(r_max):
        k = j + 1
        R = Z - (S.U[:, :k] * S.D[:k]) @ S.V[:, :k].T
        V[j] = float(np.sum(R * R))
    ks = np.arange(1, r_max + 1)
    with np.errstate(divide="ignore"):
        ic = np.log(V) + _penalty(criterion, ks, T, N)
    return V, ic


def select_r(X, r_max: int, criterion: str = "icp2") -> int:
    """Number of factors minimizing the information criterion over ``1..r_max``.

    Ties go to the smaller ``k``.  When some ``k`` fits exactly (residual below
    1e-20 of the total sum of squares) the smallest such ``k`` is returned.
    """
    V, ic = ic_values(X, r_max, criterion)
    X = np.asarray(X, dtype=float)
    total = float(np.sum(X * X)) / X.size
    exact = np.flatnonzero(V <= 1e-20 * max(total, np.finfo(float).tiny))
    if exact.size:
        return int(exact[0]) + 1
    return int(np.argmin(ic)) + 1


def soft_threshold_apc(X, r: int, gamma: float) -> FactorModel:
    """APC with soft-thresholded singular values ``(D - gamma)_+``.

    Factors keep the APC normalization; the loadings carry the shrunken
    singular values so that ``F Lambda' = sqrt(TN) U (D - gamma)_+ V'``.
    Components whose singular value does not exceed ``gamma`` are dropped with
    a warning.  ``gamma = 0`` reproduces :func:`estimate_apc` exactly.
    """
    X = _as_complete(X)
    T, N = X.shape
    r = _check_rank(r, T, N)
    if not gamma >= 0:
        raise InvalidInput(f"gamma must be >= 0, got {gamma!r}")
    S = _svd_of_z(X, r)
    if S.D[0] <= gamma:
        raise InvalidInput(f"gamma {gamma:g} is not below the largest singular value {S.D[0]:g}")
    D_gamma = S.D - gamma
    keep = int(np.sum(D_gamma > 0))
    if keep < r:
        warnings.warn(
            f"soft threshold removes {r - keep} of {r} components",
            RankDeficiencyWarning,
            stacklevel=2,
        )
        S = SvdResult(U=S.U[:, :keep], D=S.D[:keep], V=S.V[:, :keep])
        D_gamma = D_gamma[:keep]
    return _model(S, D_gamma, T, N, gamma=float(gamma))
