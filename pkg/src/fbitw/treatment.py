"""Treatment effects on the treated via tall-wide imputation of untreated outcomes.

Controls are observed at every period and treated units before ``T0``, so the
untreated potential outcomes of treated units after ``T0`` form the missing
rectangle.  Covariate effects are removed first by an interactive fixed
effects regression on the controls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .apc import FactorModel, estimate_apc, select_r
from .errors import DegenerateDof, InvalidInput
from .numerics import ols
from .panel import Panel, partition_blocks
from .refit import VarianceComponents, estimate_variance_components, normal_quantile, update
from .tw import ImputedPanel, impute_tw


@dataclass(frozen=True, eq=False)
class TreatmentPanel:
    """Outcomes ``Y[t, i]``, treatment flags per unit and a common adoption date.

    ``T0`` is the number of pre-treatment periods; treated units are treated
    at every period ``t >= T0`` (0-based).
    """

    Y: np.ndarray
    treated: np.ndarray
    T0: int
    X_cov: np.ndarray | None = None
    unit_ids: tuple[str, ...] = ()
    period_ids: tuple[str, ...] = ()

    def __post_init__(self):
        Y, d = self.Y, self.treated
        if Y.ndim != 2 or d.shape != (Y.shape[1],):
            raise InvalidInput("Y must be T x N and treated must have N flags")
        T = Y.shape[0]
        if not 1 <= self.T0 < T:
            raise InvalidInput(f"T0 must lie in [1, {T - 1}], got {self.T0}")
        if d.all() or not d.any():
            raise InvalidInput("need at least one treated and one control unit")
        if not np.all(np.isfinite(Y)):
            raise InvalidInput("outcomes must be finite for every unit and period")
        if self.X_cov is not None and self.X_cov.shape[:2] != Y.shape:
            raise InvalidInput(f"covariates {self.X_cov.shape} do not match outcomes {Y.shape}")

    @classmethod
    def build(
        cls,
        Y,
        treated,
        T0: int | Sequence[int],
        X_cov=None,
        unit_ids: Sequence[str] | None = None,
        period_ids: Sequence[str] | None = None,
    ) -> "TreatmentPanel":
        """Validate inputs; a per-unit ``T0`` is accepted only when it is common."""
        Y = np.array(Y, dtype=float)
        treated = np.array(treated, dtype=bool)
        T0_arr = np.atleast_1d(np.asarray(T0))
        if T0_arr.size > 1:
            vals = np.unique(T0_arr[treated] if T0_arr.size == treated.size else T0_arr)
            if vals.size != 1:
                raise InvalidInput(
                    "treated units adopt at different dates; this estimator needs a "
                    "common T0 (unit-specific spans call for a separate tall-projection method)"
                )
        T0 = int(T0_arr.flat[0])
        if X_cov is not None:
            X_cov = np.array(X_cov, dtype=float)
            if X_cov.ndim == 2:
                X_cov = X_cov[:, :, None]
            if X_cov.shape[2] == 0:
                X_cov = None
        T, N = Y.shape
        uids = tuple(unit_ids) if unit_ids is not None else tuple(f"u{i + 1}" for i in range(N))
        pids = tuple(period_ids) if period_ids is not None else tuple(str(t + 1) for t in range(T))
        return cls(Y=Y, treated=treated, T0=T0, X_cov=X_cov, unit_ids=uids, period_ids=pids)

    @property
    def K(self) -> int:
        return 0 if self.X_cov is None else self.X_cov.shape[2]

    @property
    def controls(self) -> np.ndarray:
        return np.flatnonzero(~self.treated)

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.treated)

    @property
    def N0(self) -> int:
        return int((~self.treated).sum())

    @property
    def N1(self) -> int:
        return int(self.treated.sum())

    @property
    def T1(self) -> int:
        return self.Y.shape[0] - self.T0


@dataclass(frozen=True, eq=False)
class IfeResult:
    beta: np.ndarray
    model: FactorModel
    iterations: int
    converged: bool


def estimate_ife_beta(
    tp: TreatmentPanel, r: int, tol: float = 1e-8, max_iter: int = 1000
) -> IfeResult:
    """Interactive fixed effects on the controls.

    Alternates pooled OLS of ``Y - C`` on the covariates with rank-``r`` APC of
    ``Y - X beta``, starting from ``C = 0``, until ``|beta_k - beta_{k-1}| < tol``.
    """
    ctrl = tp.controls
    Yc = tp.Y[:, ctrl]
    if tp.K == 0:
        return IfeResult(np.empty(0), estimate_apc(Yc, r), 0, True)
    Xc = tp.X_cov[:, ctrl, :].reshape(-1, tp.K)
    y = Yc.reshape(-1)
    beta = ols(y, Xc)
    converged = False
    k = 0
    while k < max_iter:
        k += 1
        fm = estimate_apc(Yc - (Xc @ beta).reshape(Yc.shape), r)
        new = ols(y - fm.common().reshape(-1), Xc)
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < tol:
            converged = True
            break
    fm = estimate_apc(Yc - (Xc @ beta).reshape(Yc.shape), r)
    return IfeResult(beta, fm, k, converged)


def residual_dof(T: int, N0: int, r: int, K: int) -> int:
    return T * N0 - r * (T + N0) + r * r - K


def sigma_e_hat(resid: np.ndarray, r: int, K: int = 0, dof: int | None = None) -> float:
    """Error variance from control residuals (``T x N0``)."""
    resid = np.asarray(resid, dtype=float)
    T, N0 = resid.shape
    dof = residual_dof(T, N0, r, K) if dof is None else dof
    if dof <= 0:
        raise DegenerateDof(f"residual degrees of freedom {dof} <= 0")
    return float(np.sum(resid * resid)) / dof


def att_variance(
    lam_bar: np.ndarray,
    Sigma_Lambda: np.ndarray,
    Gamma: np.ndarray,
    sigma_e2: float,
    N0: int,
    N1: int,
) -> tuple[float, float, float]:
    """``(V_hat, delta, se)`` for a period-``t`` average effect.

    ``se**2 = lam' S^-1 Gamma S^-1 lam / N0 + sigma_e2 / N1`` and
    ``V_hat = delta**2 * se**2`` with ``delta = min(sqrt(N0), sqrt(N1))``.
    """
    lam_bar = np.atleast_1d(np.asarray(lam_bar, float))
    a = np.linalg.solve(np.atleast_2d(Sigma_Lambda), lam_bar)
    var = float(a @ np.atleast_2d(Gamma) @ a) / N0 + sigma_e2 / N1
    var = max(var, 0.0)
    delta = float(np.sqrt(min(N0, N1)))
    return delta**2 * var, delta, float(np.sqrt(var))


@dataclass(frozen=True, eq=False)
class TreatmentResult:
    """Effects of treated units after ``T0``.

    ``theta_it`` is ``T1 x N1`` with columns ordered like ``treated_idx``.
    """

    theta_it: np.ndarray
    theta_t: np.ndarray
    theta_j: np.ndarray
    se_theta_t: np.ndarray
    se_theta_it: np.ndarray
    se_theta_j: np.ndarray
    beta_hat: np.ndarray
    sigma_e2_hat: float
    C_hat: np.ndarray
    level: float
    T0: int
    treated_idx: np.ndarray
    controls: np.ndarray
    model: FactorModel
    vc: VarianceComponents
    imputed: ImputedPanel
    resid: np.ndarray
    stationary: bool = True

    def ci(self, est: np.ndarray, se: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = normal_quantile(0.5 + self.level / 2.0)
        return est - z * se, est + z * se

    @property
    def ci_theta_t(self):
        return self.ci(self.theta_t, self.se_theta_t)

    @property
    def ci_theta_it(self):
        return self.ci(self.theta_it, self.se_theta_it)

    @property
    def ci_theta_j(self):
        return self.ci(self.theta_j, self.se_theta_j)


def _gamma_t(res: TreatmentResult, vc: VarianceComponents, t: int, stationary: bool) -> np.ndarray:
    if stationary:
        return vc.Gamma_t[t]
    return vc.B_Lambda @ vc.Gamma_ot[t] @ vc.B_Lambda.T


def _phi_j(vc: VarianceComponents, j: int, stationary: bool) -> np.ndarray:
    # treated units are observed only before T0, so Phi_j is already a pre-period average
    if stationary:
        return vc.Phi_i[j]
    return vc.B_F @ vc.Phi_oi[j] @ vc.B_F.T


def att_variance_t(
    res: TreatmentResult, vc: VarianceComponents | None = None, t: int = 0, stationary: bool | None = None
) -> tuple[float, float, float, float, float]:
    """``(V_hat, delta, se, ci_low, ci_high)`` for the average effect at period ``t``."""
    vc = res.vc if vc is None else vc
    stationary = res.stationary if stationary is None else stationary
    if t < res.T0:
        raise InvalidInput(f"period {t} precedes treatment start {res.T0}")
    L = res.model.Lambda
    lam_bar = L[res.treated_idx].mean(axis=0)
    V_hat, delta, se = att_variance(
        lam_bar,
        vc.Sigma_Lambda,
        _gamma_t(res, vc, t, stationary),
        res.sigma_e2_hat,
        len(res.controls),
        len(res.treated_idx),
    )
    est = res.theta_t[t - res.T0]
    lo, hi = res.ci(np.array(est), np.array(se))
    return V_hat, delta, se, float(lo), float(hi)


def _unit_pos(res: TreatmentResult, j: int) -> int:
    pos = np.flatnonzero(res.treated_idx == j)
    if pos.size == 0:
        raise InvalidInput(f"unit {j} is not treated")
    return int(pos[0])


def individual_effect_inference(
    res: TreatmentResult, vc: VarianceComponents | None = None, j: int = 0, t: int = 0,
    stationary: bool | None = None,
) -> tuple[float, float, float, float]:
    """``(theta, se, ci_low, ci_high)`` for unit ``j`` (column index) at period ``t``.

    The variance adds the factor and loading estimation terms to the
    cross-sectional average of squared control residuals at ``t``, which
    stands in for the variance of the unit's own error.
    """
    vc = res.vc if vc is None else vc
    stationary = res.stationary if stationary is None else stationary
    if t < res.T0:
        raise InvalidInput(f"period {t} precedes treatment start {res.T0}")
    k = _unit_pos(res, j)
    F, L = res.model.F, res.model.Lambda
    SFi = np.linalg.inv(vc.Sigma_F)
    SLi = np.linalg.inv(vc.Sigma_Lambda)
    f = SFi @ F[t]
    a = SLi @ L[j]
    N0 = len(res.controls)
    s2_t = float(np.mean(res.resid[t, res.controls] ** 2))
    var = (
        float(f @ _phi_j(vc, j, stationary) @ f) / res.T0
        + float(a @ _gamma_t(res, vc, t, stationary) @ a) / N0
        + s2_t
    )
    se = float(np.sqrt(max(var, 0.0)))
    est = float(res.theta_it[t - res.T0, k])
    lo, hi = res.ci(np.array(est), np.array(se))
    return est, se, float(lo), float(hi)


def _individual_variances(res: TreatmentResult, vc: VarianceComponents) -> np.ndarray:
    """Vectorized individual-effect variances, ``T1 x N1``."""
    T0, trt, st = res.T0, res.treated_idx, res.stationary
    F_post = res.model.F[T0:] @ np.linalg.inv(vc.Sigma_F)
    A = res.model.Lambda[trt] @ np.linalg.inv(vc.Sigma_Lambda)
    Phi = np.stack([_phi_j(vc, j, st) for j in trt])
    G = np.stack([_gamma_t(res, vc, t, st) for t in range(T0, res.model.F.shape[0])])
    s2 = np.mean(res.resid[T0:][:, res.controls] ** 2, axis=1)
    var = (
        np.einsum("sa,kab,sb->sk", F_post, Phi, F_post) / T0
        + np.einsum("ka,sab,kb->sk", A, G, A) / len(res.controls)
        + s2[:, None]
    )
    return np.maximum(var, 0.0)


def individual_variance_terms(res: TreatmentResult, j: int, t: int) -> tuple[float, float, float]:
    """Factor, loading and idiosyncratic parts of the individual-effect variance."""
    vc = res.vc
    F, L = res.model.F, res.model.Lambda
    f = np.linalg.solve(vc.Sigma_F, F[t])
    a = np.linalg.solve(vc.Sigma_Lambda, L[j])
    return (
        float(f @ _phi_j(vc, j, res.stationary) @ f) / res.T0,
        float(a @ _gamma_t(res, vc, t, res.stationary) @ a) / len(res.controls),
        float(np.mean(res.resid[t, res.controls] ** 2)),
    )


def unit_average_effect_inference(
    res: TreatmentResult, vc: VarianceComponents | None = None, j: int = 0,
    stationary: bool | None = None,
) -> tuple[float, float, float, float, float]:
    """``(theta_j, V_hat, se, ci_low, ci_high)`` for the post-period mean effect of unit ``j``."""
    vc = res.vc if vc is None else vc
    stationary = res.stationary if stationary is None else stationary
    k = _unit_pos(res, j)
    T0 = res.T0
    T1 = res.theta_it.shape[0]
    if T1 < 2:
        raise InvalidInput("unit averages need at least two post-treatment periods")
    F = res.model.F
    f = np.linalg.solve(vc.Sigma_F, F[T0:].mean(axis=0))
    e_pre = res.resid[:T0, j]
    r = F.shape[1]
    s2_j = float(np.sum(e_pre**2)) / (T0 - r if T0 > r else T0)
    var = max(float(f @ _phi_j(vc, j, stationary) @ f) / T0 + s2_j / T1, 0.0)
    delta = float(np.sqrt(min(T0, T1)))
    se = float(np.sqrt(var))
    est = float(res.theta_j[k])
    lo, hi = res.ci(np.array(est), np.array(se))
    return est, delta**2 * var, se, float(lo), float(hi)


def att_tw(
    tp: TreatmentPanel,
    r: int | str,
    use_refit: bool = True,
    level: float = 0.95,
    stationary: bool = True,
    include_treated_pre: bool = False,
    hac_lags: int = 0,
) -> TreatmentResult:
    """Individual, period-average and unit-average effects on the treated.

    ``include_treated_pre`` adds the treated units' pre-treatment residuals to
    the error-variance estimate.
    """
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"level must lie in (0, 1), got {level}")
    T, N = tp.Y.shape
    T0 = tp.T0
    ctrl, trt = tp.controls, tp.treated_idx
    r_ife = r
    if r == "auto":
        Yc = tp.Y[:, ctrl]
        r_ife = select_r(Yc, max(1, min(8, min(Yc.shape) // 2)))
    ife = estimate_ife_beta(tp, int(r_ife))
    xb = np.zeros((T, N)) if tp.K == 0 else tp.X_cov @ ife.beta
    R = tp.Y - xb

    mask = np.ones((T, N), bool)
    mask[np.ix_(np.arange(T0, T), trt)] = False
    panel = Panel.from_array(R, mask, series_ids=tp.unit_ids or None, period_ids=tp.period_ids or None)
    bp = partition_blocks(panel)
    ip, est = impute_tw(panel, r, bp)
    ip_fit, fm = update(ip)
    if use_refit:
        ip = ip_fit
    C = ip.C_tilde

    resid = np.where(mask, R - C, 0.0)
    r_used = fm.r
    if include_treated_pre:
        dof = T * len(ctrl) + T0 * len(trt) - r_used * (T + N) + r_used**2 - tp.K
        if dof <= 0:
            raise DegenerateDof(f"residual degrees of freedom {dof} <= 0")
        s2 = float(np.sum(resid[:, ctrl] ** 2) + np.sum(resid[:T0][:, trt] ** 2)) / dof
    else:
        s2 = sigma_e_hat(resid[:, ctrl], r_used, tp.K)
    vc = estimate_variance_components(fm, ip_fit, bp, hac_lags)

    theta_it = (tp.Y - xb - C)[T0:][:, trt]
    theta_t = theta_it.mean(axis=1)
    theta_j = theta_it.mean(axis=0)
    res = TreatmentResult(
        theta_it=theta_it,
        theta_t=theta_t,
        theta_j=theta_j,
        se_theta_t=np.zeros(T - T0),
        se_theta_it=np.zeros_like(theta_it),
        se_theta_j=np.zeros(len(trt)),
        beta_hat=ife.beta,
        sigma_e2_hat=s2,
        C_hat=C,
        level=level,
        T0=T0,
        treated_idx=trt,
        controls=ctrl,
        model=fm,
        vc=vc,
        imputed=ip,
        resid=resid,
        stationary=stationary,
    )
    for s in range(T0, T):
        res.se_theta_t[s - T0] = att_variance_t(res, vc, s)[2]
    res.se_theta_it[:] = np.sqrt(_individual_variances(res, vc))
    if T - T0 >= 2:
        for k, j in enumerate(trt):
            res.se_theta_j[k] = unit_average_effect_inference(res, vc, j)[2]
    else:
        res.se_theta_j[:] = np.nan
    return res
