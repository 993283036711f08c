"""Re-estimation on the completed panel and plug-in inference for each cell.

The variance of ``C_hat[t, i]`` combines a factor-side term ``V`` (driven by
cross-section noise at period ``t``) and a loading-side term ``W`` (driven by
time-series noise of series ``i``).  Which sample sizes scale them depends on
the cell's block; see :func:`panel_inference`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from .apc import FactorModel, estimate_apc
from .errors import InsufficientData, SingularSubBlock
from .panel import BAL, BLOCKS, MISS, TALL, WIDE, BlockPartition
from .tw import ImputedPanel, _tall_wins, block_rates, fill, rate

#: floor applied to numerically nonpositive variances
VAR_FLOOR = 1e-12
#: condition number above which a sub-block Gram is treated as singular
SUBGRAM_MAX_COND = 1e12


def normal_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def reestimate(ip: ImputedPanel, r: int | None = None) -> FactorModel:
    """APC on the completed matrix."""
    return estimate_apc(ip.X_tilde, ip.r if r is None else r)


def update(ip: ImputedPanel, r: int | None = None) -> tuple[ImputedPanel, FactorModel]:
    """Re-estimate on ``X_tilde`` and refill the unobserved cells.

    BAL cells move to the full-panel rate; the other blocks keep theirs.
    """
    fm = reestimate(ip, r)
    C = fm.common()
    delta = ip.delta.copy()
    delta[ip.block_label == BAL] = rate(ip.partition.N, ip.partition.T)
    values = np.where(ip.mask, ip.X_tilde, np.nan)
    out = replace(
        ip,
        X_tilde=fill(values, ip.mask, C),
        C_tilde=C,
        delta=delta,
        r=fm.r,
        method="tw-updated",
        variance=None,
        se=None,
    )
    return out, fm


def _inv(S: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) >= SUBGRAM_MAX_COND:
        raise SingularSubBlock(f"{what} is singular")
    return np.linalg.inv(S)


def _mixing(A: np.ndarray, idx_o: np.ndarray, idx_m: np.ndarray, what: str) -> np.ndarray:
    r = A.shape[1]
    n, n_o, n_m = A.shape[0], len(idx_o), len(idx_m)
    if n_m == 0:
        return np.eye(r)
    A_o, A_m = A[idx_o], A[idx_m]
    S_o = A_o.T @ A_o / n_o
    S_m = A_m.T @ A_m / n_m
    return (n_o / n) * np.eye(r) + (n_m / n) * S_m @ _inv(S_o, what)


def compute_B_matrices(fm: FactorModel, bp: BlockPartition) -> tuple[np.ndarray, np.ndarray]:
    """Mixing matrices ``(B_Lambda, B_F)``; both are identity with no missing block."""
    B_L = _mixing(fm.Lambda, bp.cols_o, bp.cols_m, "loading Gram of the observed series")
    B_F = _mixing(fm.F, bp.rows_o, bp.rows_m, "factor Gram of the observed periods")
    return B_L, B_F


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    Sigma_Lambda: np.ndarray
    Sigma_F: np.ndarray
    Sigma_Lambda_o: np.ndarray
    Sigma_Lambda_m: np.ndarray
    Sigma_F_o: np.ndarray
    Sigma_F_m: np.ndarray
    Gamma_t: np.ndarray
    Phi_i: np.ndarray
    Gamma_ot: np.ndarray
    Phi_oi: np.ndarray
    B_Lambda: np.ndarray
    B_F: np.ndarray
    hac_lags: int = 0


def _gram(A: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.full((A.shape[1], A.shape[1]), np.nan)
    return A.T @ A / A.shape[0]


def cross_section_gamma(Lam: np.ndarray, E: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """``Gamma[t] = mean over observed i of Lam_i Lam_i' e_it^2`` (``T x r x r``)."""
    n = obs.sum(axis=1)
    E2 = np.where(obs, E, 0.0) ** 2
    G = np.einsum("ia,ib,ti->tab", Lam, Lam, E2)
    return G / np.maximum(n, 1)[:, None, None]


def hac_phi(F: np.ndarray, E: np.ndarray, obs: np.ndarray, lags: int = 0) -> np.ndarray:
    """Bartlett long-run variance of ``F_t e_it`` for each series (``N x r x r``).

    Unobserved cells contribute zero; the average is over observed periods.
    """
    n = obs.sum(axis=0)
    g = F[:, None, :] * np.where(obs, E, 0.0)[:, :, None]
    P = np.einsum("tia,tib->iab", g, g)
    for lag in range(1, lags + 1):
        w = 1.0 - lag / (lags + 1.0)
        S = np.einsum("tia,tib->iab", g[lag:], g[:-lag])
        P += w * (S + S.transpose(0, 2, 1))
    return P / np.maximum(n, 1)[:, None, None]


def estimate_variance_components(
    fm: FactorModel,
    ip: ImputedPanel,
    bp: BlockPartition | None = None,
    hac_lags: int = 0,
) -> VarianceComponents:
    """Plug-in Sigma, Gamma and Phi matrices from residuals on observed cells."""
    bp = ip.partition if bp is None else bp
    if hac_lags < 0:
        raise ValueError(f"hac_lags must be >= 0, got {hac_lags}")
    obs = ip.mask
    r = fm.F.shape[1]
    n_t, n_i = obs.sum(axis=1), obs.sum(axis=0)
    if n_t.min() < r + 1 or n_i.min() < r + 1:
        raise InsufficientData(
            f"need at least r+1 = {r + 1} observed cells in every period and series"
        )
    E = np.where(obs, ip.X_tilde - fm.common(), 0.0)
    F, L = fm.F, fm.Lambda
    obs_o = np.zeros_like(obs)
    obs_o[:, bp.cols_o] = True
    obs_row = np.zeros_like(obs)
    obs_row[bp.rows_o, :] = True
    B_L, B_F = compute_B_matrices(fm, bp)
    return VarianceComponents(
        Sigma_Lambda=_gram(L),
        Sigma_F=_gram(F),
        Sigma_Lambda_o=_gram(L[bp.cols_o]),
        Sigma_Lambda_m=_gram(L[bp.cols_m]),
        Sigma_F_o=_gram(F[bp.rows_o]),
        Sigma_F_m=_gram(F[bp.rows_m]),
        Gamma_t=cross_section_gamma(L, E, obs),
        Phi_i=hac_phi(F, E, obs, hac_lags),
        Gamma_ot=cross_section_gamma(L, E, obs_o),
        Phi_oi=hac_phi(F, E, obs_row, hac_lags),
        B_Lambda=B_L,
        B_F=B_F,
        hac_lags=int(hac_lags),
    )


def _sandwich(B: np.ndarray, M: np.ndarray) -> np.ndarray:
    return np.einsum("ab,kbc,dc->kad", B, M, B)


def _quad(A: np.ndarray, M: np.ndarray, rows_first: bool) -> np.ndarray:
    """``out[t, i] = A_k' M_j A_k`` with ``k`` on one axis and ``j`` on the other."""
    if rows_first:
        # A indexed by i (columns), M by t (rows)
        return np.einsum("ia,tab,ib->ti", A, M, A)
    # A indexed by t (rows), M by i (columns)
    return np.einsum("ta,iab,tb->ti", A, M, A)


@dataclass(frozen=True, eq=False)
class PanelInference:
    C_hat: np.ndarray
    V_hat: np.ndarray
    delta: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    labels: np.ndarray
    level: float


@dataclass(frozen=True)
class CellInference:
    C_hat: float
    se: float
    delta: float
    V_hat: float
    ci_low: float
    ci_high: float
    block: str


def _terms(fm: FactorModel, vc: VarianceComponents, stationary: bool, updated: bool):
    """Loading-side ``V`` and factor-side ``W`` terms, full-sample and subsample."""
    SLi = np.linalg.inv(vc.Sigma_Lambda)
    SFi = np.linalg.inv(vc.Sigma_F)
    A = fm.Lambda @ SLi
    G = fm.F @ SFi
    V = _quad(A, vc.Gamma_t, rows_first=True)
    W = _quad(G, vc.Phi_i, rows_first=False)
    if stationary:
        return V, W, V, W
    if updated:
        V_o = _quad(A, _sandwich(vc.B_Lambda, vc.Gamma_ot), rows_first=True)
        W_o = _quad(G, _sandwich(vc.B_F, vc.Phi_oi), rows_first=False)
    else:
        A_o = fm.Lambda @ np.linalg.inv(vc.Sigma_Lambda_o)
        G_o = fm.F @ np.linalg.inv(vc.Sigma_F_o)
        V_o = _quad(A_o, vc.Gamma_ot, rows_first=True)
        W_o = _quad(G_o, vc.Phi_oi, rows_first=False)
    return V, W, V_o, W_o


def panel_inference(
    fm: FactorModel,
    vc: VarianceComponents,
    bp: BlockPartition,
    level: float = 0.95,
    stationary: bool = True,
    updated: bool = True,
    C_hat: np.ndarray | None = None,
) -> PanelInference:
    """Standard errors and confidence intervals for every cell.

    With ``updated`` the estimate is the re-estimated common component and
    BAL cells converge at the full-panel rate.  Otherwise BAL cells inherit
    the TALL or WIDE rate, whichever block supplied their estimate.
    ``C_hat`` overrides the point estimate (defaults to ``fm.common()``).
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    T, N, N_o, T_o = bp.T, bp.N, bp.N_o, bp.T_o
    V, W, V_o, W_o = _terms(fm, vc, stationary, updated)
    labels = bp.labels()
    var = np.empty((T, N))
    delta = np.empty((T, N))
    rates = block_rates(bp)

    def put(lab_mask, v, d):
        var[lab_mask] = v[lab_mask]
        delta[lab_mask] = d

    put(labels == TALL, V_o / N_o + W / T, rates[TALL])
    put(labels == WIDE, V / N + W_o / T_o, rates[WIDE])
    put(labels == MISS, V_o / N_o + W_o / T_o, rates[MISS])
    bal = labels == BAL
    if updated:
        put(bal, V / N + W / T, rate(N, T))
    elif _tall_wins(bp):
        put(bal, V_o / N_o + W / T, rates[TALL])
    else:
        put(bal, V / N + W_o / T_o, rates[WIDE])

    if np.any(var < VAR_FLOOR):
        if np.any(var < -VAR_FLOOR):
            warnings.warn("negative variance estimates floored", RuntimeWarning, stacklevel=2)
        var = np.maximum(var, VAR_FLOOR)
    V_hat = var * delta**2
    se = np.sqrt(var)
    C = fm.common() if C_hat is None else np.asarray(C_hat, dtype=float)
    z = normal_quantile(0.5 + level / 2.0)
    return PanelInference(
        C_hat=C,
        V_hat=V_hat,
        delta=delta,
        se=se,
        ci_low=C - z * se,
        ci_high=C + z * se,
        labels=labels,
        level=level,
    )


def cell_inference(
    fm: FactorModel,
    vc: VarianceComponents,
    bp: BlockPartition,
    i: int,
    t: int,
    level: float = 0.95,
    stationary: bool = True,
    updated: bool = True,
) -> CellInference:
    """Inference for series ``i`` at period ``t``."""
    pi = panel_inference(fm, vc, bp, level, stationary, updated)
    return CellInference(
        C_hat=float(pi.C_hat[t, i]),
        se=float(pi.se[t, i]),
        delta=float(pi.delta[t, i]),
        V_hat=float(pi.V_hat[t, i]),
        ci_low=float(pi.ci_low[t, i]),
        ci_high=float(pi.ci_high[t, i]),
        block=str(pi.labels[t, i]),
    )


TABLE_BLOCKS = ("full", "tall", "wide", "bal", "miss")


@dataclass(frozen=True)
class BlockErrors:
    """Normalized Frobenius errors ``||E_b|| / sqrt(|b|)``.

    ``blocks`` holds the four disjoint blocks with ``weights`` equal to their
    share of cells, so ``overall**2 == sum(w * e**2)``.  ``table`` uses the
    overlapping layout (full panel, all periods of the observed series, all
    series at the observed periods, BAL, MISS); ``table_x100`` rescales the
    same norms as ``100 ||E_b|| / |b|``.
    """

    blocks: dict
    weights: dict
    overall: float
    table: dict
    table_x100: dict


def block_error_summary(C_hat, C0, bp: BlockPartition) -> BlockErrors:
    C_hat = C_hat.C_tilde if isinstance(C_hat, ImputedPanel) else np.asarray(C_hat, float)
    E = C_hat - np.asarray(C0, float)
    labels = bp.labels()
    size = E.size
    blocks, weights = {}, {}
    for lab in BLOCKS:
        sel = labels == lab
        n = int(sel.sum())
        weights[lab] = n / size
        blocks[lab] = float(np.linalg.norm(E[sel]) / np.sqrt(n)) if n else float("nan")
    overall = float(np.linalg.norm(E) / np.sqrt(size))
    regions = {
        "full": E,
        "tall": E[:, bp.cols_o],
        "wide": E[bp.rows_o, :],
        "bal": E[np.ix_(bp.rows_o, bp.cols_o)],
        "miss": E[np.ix_(bp.rows_m, bp.cols_m)],
    }
    table, table_x100 = {}, {}
    for name, R in regions.items():
        nrm = float(np.linalg.norm(R))
        table[name] = nrm / np.sqrt(R.size) if R.size else float("nan")
        table_x100[name] = 100.0 * nrm / R.size if R.size else float("nan")
    return BlockErrors(blocks, weights, overall, table, table_x100)
