"""Iterative EM-style imputation: refit APC on the filled panel until the fill settles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .apc import FactorModel, estimate_apc, select_r
from .errors import InvalidInput, NoBalancedBlock
from .numerics import ols
from .panel import BlockPartition, Panel, partition_blocks
from .tw import R_MAX_DEFAULT, ImputedPanel, delta_matrix, fill, impute_tw

INITS = ("balanced", "zero", "tw")


@dataclass(frozen=True, eq=False)
class EmInfo:
    iterations: int
    converged: bool
    objective: np.ndarray
    model: FactorModel


def balanced_start(p: Panel, r: int, bp: BlockPartition) -> np.ndarray:
    """Common component built from APC on the BAL block.

    Loadings of every series come from regressing its values at the fully
    observed periods on the BAL factors; factors of every period come from
    regressing the fully observed series on the BAL loadings.
    """
    bal = p.values[np.ix_(bp.rows_o, bp.cols_o)]
    fm = estimate_apc(bal, r)
    Lam = ols(p.values[bp.rows_o, :], fm.F).T
    F = ols(p.values[:, bp.cols_o].T, fm.Lambda).T
    return F @ Lam.T


def _partition(p: Panel) -> BlockPartition:
    try:
        return partition_blocks(p)
    except NoBalancedBlock:
        return BlockPartition.from_counts(p.T, p.N, 0, 0)


def impute_em(
    p: Panel,
    r: int | str,
    init: str = "balanced",
    tol: float = 1e-6,
    max_iter: int = 500,
    r_max: int = R_MAX_DEFAULT,
) -> tuple[ImputedPanel, EmInfo]:
    """Alternate APC on the filled matrix with refilling the unobserved cells.

    Stops once ``max |C_k - C_{k-1}| / (1 + max |C_k|)`` over unobserved cells
    drops below ``tol``.  ``r="auto"`` picks the rank on the initial fill.
    Hitting ``max_iter`` returns the last iterate with ``converged=False``.
    """
    if init not in INITS:
        raise InvalidInput(f"unknown init {init!r}; choose from {INITS}")
    if max_iter < 1:
        raise InvalidInput("max_iter must be >= 1")
    if init == "zero":
        bp = _partition(p)
        start = np.zeros(p.shape)
    else:
        bp = partition_blocks(p)
        if init == "tw":
            ip0, est = impute_tw(p, r, bp, r_max=r_max)
            start = ip0.C_tilde
        else:
            r0 = r
            if r == "auto":
                bal = p.values[np.ix_(bp.rows_o, bp.cols_o)]
                r0 = select_r(bal, max(1, min(r_max, min(bal.shape) // 2)))
            start = balanced_start(p, r0, bp)
    X = fill(p.values, p.mask, start)
    if r == "auto":
        r = select_r(X, max(1, min(r_max, min(X.shape) // 2)))
    r = int(r)

    miss = ~p.mask
    objective = []
    converged = False
    k = 0
    while k < max_iter:
        k += 1
        fm = estimate_apc(X, r)
        C = fm.common()
        R = X - C
        objective.append(float(np.sum(R * R)))
        change = np.max(np.abs(C[miss] - X[miss])) if miss.any() else 0.0
        X[miss] = C[miss]
        if change / (1.0 + np.max(np.abs(C))) < tol:
            converged = True
            break

    labels = bp.labels()
    ip = ImputedPanel(
        X_tilde=X,
        C_tilde=C,
        block_label=labels,
        delta=delta_matrix(bp, labels),
        partition=bp,
        mask=p.mask.copy(),
        r=r,
        method="em",
        series_ids=p.series_ids,
        period_ids=p.period_ids,
        scale_stats=p.scale_stats,
    )
    return ip, EmInfo(iterations=k, converged=converged, objective=np.array(objective), model=fm)
