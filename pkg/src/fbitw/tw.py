"""Tall-wide imputation.

Factors come from the TALL block (fully observed series over all periods) and
loadings from the WIDE block (all series over fully observed periods).  The
two rotations are reconciled by regressing the TALL loadings on the WIDE
loadings of the shared series, which gives the common component on the
missing rectangle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .apc import FactorModel, estimate_apc, select_r, soft_threshold_apc
from .errors import CollinearLoadings, OrderConditionError, SingularDesign
from .numerics import ols
from .panel import (
    BAL,
    MISS,
    TALL,
    WIDE,
    BlockPartition,
    Panel,
    ScaleStats,
    check_order_conditions,
    partition_blocks,
)

#: default upper bound for automatic rank selection
R_MAX_DEFAULT = 8


@dataclass(frozen=True, eq=False)
class TwEstimate:
    """Block estimates.  Row/column order follows the original panel.

    ``F_tall`` is ``T x r``, ``Lambda_tall`` is ``N_o x r`` in ``cols_o`` order,
    ``F_wide`` is ``T_o x r`` in ``rows_o`` order and ``Lambda_wide`` is ``N x r``.
    ``H_miss`` satisfies ``Lambda_tall[k] ~ H_miss @ Lambda_wide[cols_o[k]]``.
    """

    tall: FactorModel
    wide: FactorModel
    H_miss: np.ndarray
    r_tall: int
    r_wide: int
    r: int

    @property
    def F_tall(self) -> np.ndarray:
        return self.tall.F

    @property
    def Lambda_tall(self) -> np.ndarray:
        return self.tall.Lambda

    @property
    def F_wide(self) -> np.ndarray:
        return self.wide.F

    @property
    def Lambda_wide(self) -> np.ndarray:
        return self.wide.Lambda


@dataclass(frozen=True, eq=False)
class ImputedPanel:
    """Completed panel.  ``X_tilde`` equals the data on observed cells."""

    X_tilde: np.ndarray
    C_tilde: np.ndarray
    block_label: np.ndarray
    delta: np.ndarray
    partition: BlockPartition
    mask: np.ndarray
    r: int
    method: str = "tw"
    series_ids: tuple[str, ...] = ()
    period_ids: tuple[str, ...] = ()
    scale_stats: ScaleStats | None = None
    variance: np.ndarray | None = None
    se: np.ndarray | None = None


def rate(a: float, b: float) -> float:
    """``min(sqrt(a), sqrt(b))``."""
    return float(np.sqrt(min(a, b)))


def _tall_wins(bp: BlockPartition) -> bool:
    # ties go to the WIDE estimate
    return min(bp.N_o, bp.T) > min(bp.N, bp.T_o)


def block_rates(bp: BlockPartition) -> dict[str, float]:
    tall = rate(bp.N_o, bp.T)
    wide = rate(bp.N, bp.T_o)
    return {BAL: max(tall, wide), TALL: tall, WIDE: wide, MISS: rate(bp.N_o, bp.T_o)}


def classify_cell(bp: BlockPartition, i: int, t: int) -> tuple[str, float]:
    """Block label and convergence rate of series ``i`` at period ``t``."""
    label = bp.label_at(i, t)
    return label, block_rates(bp)[label]


def delta_matrix(bp: BlockPartition, labels: np.ndarray | None = None) -> np.ndarray:
    labels = bp.labels() if labels is None else labels
    rates = block_rates(bp)
    out = np.empty(labels.shape)
    for lab, d in rates.items():
        out[labels == lab] = d
    return out


def _fit(X: np.ndarray, r: int, shrink: float | None) -> FactorModel:
    if shrink is None:
        return estimate_apc(X, r)
    fm = estimate_apc(X, r)
    return soft_threshold_apc(X, r, shrink * float(fm.D[0]))


def _auto_rank(p: Panel, bp: BlockPartition, r_max: int) -> tuple[int, int]:
    tall = p.values[:, bp.cols_o]
    wide = p.values[bp.rows_o, :]
    cap_t = min(r_max, min(tall.shape) // 2)
    cap_w = min(r_max, min(wide.shape) // 2)
    return select_r(tall, max(cap_t, 1)), select_r(wide, max(cap_w, 1))


def fit_tw(
    p: Panel,
    r: int | str,
    bp: BlockPartition | None = None,
    shrink: float | None = None,
    r_max: int = R_MAX_DEFAULT,
) -> TwEstimate:
    """Run the block factorizations and the re-rotation regression."""
    bp = partition_blocks(p) if bp is None else bp
    if isinstance(r, str):
        if r != "auto":
            raise ValueError(f"rank must be an integer or 'auto', got {r!r}")
        r_tall, r_wide = _auto_rank(p, bp, r_max)
        r = max(r_tall, r_wide)
    else:
        r_tall = r_wide = int(r)
    report = check_order_conditions(bp, r)
    if not report:
        raise OrderConditionError(f"order conditions fail at r={r}: {report.message}")

    tall = _fit(p.values[:, bp.cols_o], r, shrink)
    wide = _fit(p.values[bp.rows_o, :], r, shrink)
    try:
        B = ols(tall.Lambda, wide.Lambda[bp.cols_o])
    except SingularDesign as exc:
        raise CollinearLoadings(
            "WIDE loadings of the fully observed series have a singular Gram matrix"
        ) from exc
    return TwEstimate(tall=tall, wide=wide, H_miss=B.T, r_tall=r_tall, r_wide=r_wide, r=int(r))


def assemble(est: TwEstimate, bp: BlockPartition) -> np.ndarray:
    """Common component on every cell from the block estimates."""
    C = est.F_tall @ (est.Lambda_wide @ est.H_miss.T).T
    C_tall = est.F_tall @ est.Lambda_tall.T
    C_wide = est.F_wide @ est.Lambda_wide.T
    C[:, bp.cols_o] = C_tall
    C[bp.rows_o, :] = C_wide
    if _tall_wins(bp):
        C[np.ix_(bp.rows_o, bp.cols_o)] = C_tall[bp.rows_o]
    return C


def fill(values: np.ndarray, mask: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Observed values where ``mask`` holds, ``C`` elsewhere."""
    return np.where(mask, values, C)


def impute_tw(
    p: Panel,
    r: int | str,
    bp: BlockPartition | None = None,
    shrink: float | None = None,
    r_max: int = R_MAX_DEFAULT,
) -> tuple[ImputedPanel, TwEstimate]:
    """Tall-wide imputation of the missing cells of ``p``.

    Parameters
    ----------
    r : int or "auto"
        Number of factors.  ``"auto"`` selects a rank per block with
        :func:`select_r` and refits both blocks at the larger one.
    bp : BlockPartition, optional
        Defaults to :func:`partition_blocks` of ``p``.
    shrink : float, optional
        Soft-threshold each block's singular values by ``shrink * D[0]``
        (the RPC comparison estimator).  ``None`` gives plain APC.
    """
    bp = partition_blocks(p) if bp is None else bp
    est = fit_tw(p, r, bp, shrink=shrink, r_max=r_max)
    C = assemble(est, bp)
    labels = bp.labels()
    ip = ImputedPanel(
        X_tilde=fill(p.values, p.mask, C),
        C_tilde=C,
        block_label=labels,
        delta=delta_matrix(bp, labels),
        partition=bp,
        mask=p.mask.copy(),
        r=est.r,
        method="tw" if shrink is None else "rpc",
        series_ids=p.series_ids,
        period_ids=p.period_ids,
        scale_stats=p.scale_stats,
    )
    return ip, est
