"""Seeded Monte Carlo harness for the imputation and treatment-effect tables.

Every replication draws from its own random stream keyed on
``(seed, rep, tag)``, and BLAS runs single-threaded inside a replication, so
results do not depend on worker count or scheduling order.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from importlib.metadata import PackageNotFoundError, version

import numpy as np
from scipy.special import ndtri
from threadpoolctl import threadpool_limits

from .apc import estimate_apc
from .em import impute_em
from .errors import FbiError, InvalidInput
from .panel import BAL, MISS, RAW, TALL, WIDE, BlockPartition, Panel, rescale, unscale
from .refit import TABLE_BLOCKS, block_error_summary, update
from .treatment import TreatmentPanel, att_tw, individual_effect_inference
from .tw import impute_tw

METHODS = ("full", "tw", "tw_updated", "em", "rpc")
DEFAULT_METHODS = ("full", "tw", "tw_updated", "em")
#: (N_o / N, T_o / T) for the four missing-data layouts
CASE_FRACTIONS = {1: (0.6, 0.6), 2: (0.6, 0.3), 3: (0.3, 0.6), 4: (0.3, 0.3)}
CELL_BLOCKS = {"tall": TALL, "wide": WIDE, "bal": BAL, "miss": MISS}
_TAGS = {"factors": 1, "loadings": 2, "noise": 3}


@dataclass(frozen=True)
class McConfig:
    N: int = 200
    T: int = 200
    r: int = 2
    diag_D: tuple[float, ...] = (1.0, 0.5)
    noise_var: float = 2.5
    reps: int = 500
    seed: int = 0
    case: int | tuple[int, int] = 1
    methods: tuple[str, ...] = DEFAULT_METHODS
    scale_modes: tuple[int, ...] = (RAW,)
    rpc_shrink: float = 0.1
    em_tol: float = 1e-6
    em_max_iter: int = 500

    def __post_init__(self):
        if self.reps < 1:
            raise InvalidInput("reps must be >= 1")
        if len(self.diag_D) != self.r:
            raise InvalidInput(f"diag_D needs {self.r} entries, got {len(self.diag_D)}")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise InvalidInput(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if set(self.scale_modes) - {0, 1, 2}:
            raise InvalidInput("scale modes must be 0, 1 or 2")
        case_dims(self)


def case_dims(cfg: McConfig) -> tuple[int, int]:
    """``(N_o, T_o)`` for the configured case."""
    if isinstance(cfg.case, tuple):
        N_o, T_o = cfg.case
    elif cfg.case in CASE_FRACTIONS:
        fn, ft = CASE_FRACTIONS[cfg.case]
        N_o, T_o = int(round(fn * cfg.N)), int(round(ft * cfg.T))
    else:
        raise InvalidInput(f"case must be 1-4 or (N_o, T_o), got {cfg.case!r}")
    if not (1 <= N_o < cfg.N and 1 <= T_o < cfg.T):
        raise InvalidInput(f"need 1 <= N_o < N and 1 <= T_o < T, got ({N_o}, {T_o})")
    return N_o, T_o


def rng_for(seed: int, rep: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, rep, _TAGS[tag]])))


def normals(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals by inverse CDF of open-interval uniforms."""
    k = rng.integers(0, 2**53, size=shape, dtype=np.int64)
    return ndtri((k + 0.5) / 2.0**53)


@dataclass(frozen=True, eq=False)
class DgpDraw:
    X: np.ndarray
    C0: np.ndarray
    F0: np.ndarray
    Lambda0: np.ndarray


def draw_factor_panel(
    T: int, N: int, diag_D, noise_var: float, seed: int, rep: int
) -> DgpDraw:
    sd = np.sqrt(np.asarray(diag_D, float))
    F0 = normals(rng_for(seed, rep, "factors"), (T, len(sd))) * sd
    L0 = normals(rng_for(seed, rep, "loadings"), (N, len(sd))) * sd
    C0 = F0 @ L0.T
    X = C0.copy()
    if noise_var > 0:
        X += np.sqrt(noise_var) * normals(rng_for(seed, rep, "noise"), (T, N))
    return DgpDraw(X=X, C0=C0, F0=F0, Lambda0=L0)


def generate_dgp(cfg: McConfig, rep: int) -> DgpDraw:
    """``X = F0 Lambda0' + e`` with Gaussian factors, loadings and errors."""
    return draw_factor_panel(cfg.T, cfg.N, cfg.diag_D, cfg.noise_var, cfg.seed, rep)


def apply_missing_case(X: np.ndarray, case: int | tuple[int, int]) -> Panel:
    """Hide the bottom-right rectangle ``t >= T_o, i >= N_o``."""
    T, N = X.shape
    N_o, T_o = case_dims(McConfig(N=N, T=T, case=case, reps=1))
    mask = np.ones((T, N), bool)
    mask[T_o:, N_o:] = False
    return Panel.from_array(X, mask)


def block_midpoints(bp: BlockPartition) -> dict[str, tuple[int, int]]:
    """``(t, i)`` at the middle of each disjoint block's index range."""
    T, N, T_o, N_o = bp.T, bp.N, bp.T_o, bp.N_o
    lo_t, hi_t = (0 + T_o - 1) // 2, (T_o + T - 1) // 2
    lo_i, hi_i = (0 + N_o - 1) // 2, (N_o + N - 1) // 2
    return {"tall": (hi_t, lo_i), "wide": (lo_t, hi_i), "bal": (lo_t, lo_i), "miss": (hi_t, hi_i)}


def _estimate(method: str, cfg: McConfig, p: Panel, X_full: np.ndarray) -> np.ndarray:
    if method == "full":
        return estimate_apc(X_full, cfg.r).common()
    if method == "em":
        return impute_em(p, cfg.r, tol=cfg.em_tol, max_iter=cfg.em_max_iter)[0].C_tilde
    ip, _ = impute_tw(p, cfg.r, shrink=cfg.rpc_shrink if method == "rpc" else None)
    if method == "tw_updated":
        return update(ip)[0].C_tilde
    return ip.C_tilde


def run_rep(cfg: McConfig, rep: int) -> dict:
    """Block errors and midpoint-cell errors for every method and scale mode."""
    with threadpool_limits(1):
        d = generate_dgp(cfg, rep)
        raw = apply_missing_case(d.X, cfg.case)
        full_raw = Panel.from_array(d.X)
        bp = BlockPartition.from_counts(cfg.T, cfg.N, *reversed(case_dims(cfg)))
        cells = block_midpoints(bp)
        out = {}
        for mode in cfg.scale_modes:
            p = rescale(raw, mode) if mode != RAW else raw
            pf = rescale(full_raw, mode) if mode != RAW else full_raw
            for method in cfg.methods:
                try:
                    src = pf if method == "full" else p
                    C = _estimate(method, cfg, p, pf.values)
                    if mode != RAW:
                        C = unscale(C, src.scale_stats)
                except FbiError as exc:
                    out[(method, mode)] = {"error": type(exc).__name__}
                    continue
                s = block_error_summary(C, d.C0, bp)
                cell = {k: float(C[t, i] - d.C0[t, i]) for k, (t, i) in cells.items()}
                out[(method, mode)] = {"table": s.table, "x100": s.table_x100, "cell": cell}
        return out


def _workers() -> int:
    try:
        n = int(os.environ.get("FBI_TW_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _map_reps(fn, cfg, reps: int) -> list:
    """Apply ``fn(cfg, rep)`` to ``rep = 0..reps-1``; results ordered by rep."""
    workers = min(_workers(), reps)
    if workers <= 1:
        return [fn(cfg, k) for k in range(reps)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, [cfg] * reps, range(reps), chunksize=max(1, reps // (4 * workers))))


def simulate(cfg: McConfig) -> list[dict]:
    return _map_reps(run_rep, cfg, cfg.reps)


def _case_label(cfg: McConfig) -> str:
    return str(cfg.case) if not isinstance(cfg.case, tuple) else f"{cfg.case[0]}x{cfg.case[1]}"


def table1_rows(cfg: McConfig, results: list[dict]) -> list[dict]:
    """Median normalized Frobenius error per (block, method, scale mode)."""
    rows = []
    for block in TABLE_BLOCKS:
        for method in cfg.methods:
            for mode in cfg.scale_modes:
                ok = [r[(method, mode)] for r in results if "error" not in r[(method, mode)]]
                rows.append({
                    "case": _case_label(cfg),
                    "block": block,
                    "method": method,
                    "scale_mode": mode,
                    "median_error": float(np.median([o["table"][block] for o in ok])) if ok else float("nan"),
                    "median_error_x100": float(np.median([o["x100"][block] for o in ok])) if ok else float("nan"),
                    "reps_ok": len(ok),
                    "reps_failed": len(results) - len(ok),
                })
    return rows


def table2_rows(cfg: McConfig, results: list[dict]) -> list[dict]:
    """RMSE at the midpoint cell of each block."""
    bp = BlockPartition.from_counts(cfg.T, cfg.N, *reversed(case_dims(cfg)))
    mids = block_midpoints(bp)
    rows = []
    for block in CELL_BLOCKS:
        t, i = mids[block]
        for method in cfg.methods:
            for mode in cfg.scale_modes:
                ok = [r[(method, mode)] for r in results if "error" not in r[(method, mode)]]
                errs = np.array([o["cell"][block] for o in ok])
                rows.append({
                    "case": _case_label(cfg),
                    "block": block,
                    "t": t,
                    "i": i,
                    "method": method,
                    "scale_mode": mode,
                    "rmse": float(np.sqrt(np.mean(errs**2))) if ok else float("nan"),
                    "reps_ok": len(ok),
                    "reps_failed": len(results) - len(ok),
                })
    return rows


def run_table1(cfg: McConfig) -> list[dict]:
    return table1_rows(cfg, simulate(cfg))


def run_table2(cfg: McConfig) -> list[dict]:
    return table2_rows(cfg, simulate(cfg))


# treatment-effect simulations

TABLE3_GRID = tuple(
    (n1, n0, t0) for n1 in (5, 20) for t0 in (15, 30, 50, 100) for n0 in (40, 80, 120, 200)
)


@dataclass(frozen=True)
class AttConfig:
    N1: int = 5
    N0: int = 40
    T0: int = 15
    T1: int = 10
    r: int = 2
    diag_D: tuple[float, ...] = (1.0, 0.5)
    noise_var: float = 1.0
    theta: float = 1.0
    reps: int = 1000
    seed: int = 0
    level: float = 0.95
    use_refit: bool = True
    horizon: int = 5

    def __post_init__(self):
        if self.T1 < self.horizon:
            raise InvalidInput(f"T1={self.T1} is shorter than the evaluation horizon {self.horizon}")


def generate_att(cfg: AttConfig, rep: int) -> tuple[TreatmentPanel, np.ndarray]:
    """Controls occupy the first ``N0`` columns; effects equal ``theta`` after ``T0``."""
    T, N = cfg.T0 + cfg.T1, cfg.N0 + cfg.N1
    d = draw_factor_panel(T, N, cfg.diag_D, cfg.noise_var, cfg.seed, rep)
    treated = np.zeros(N, bool)
    treated[cfg.N0:] = True
    Y = d.X.copy()
    Y[cfg.T0:, cfg.N0:] += cfg.theta
    return TreatmentPanel.build(Y, treated, cfg.T0), d.C0


def att_rep(cfg: AttConfig, rep: int) -> dict:
    """Errors and coverage of the individual effect and the period average."""
    with threadpool_limits(1):
        tp, _ = generate_att(cfg, rep)
        try:
            res = att_tw(tp, cfg.r, use_refit=cfg.use_refit, level=cfg.level)
        except FbiError as exc:
            return {"error": type(exc).__name__}
        t = cfg.T0 + cfg.horizon - 1
        j = cfg.N0
        est_it, se_it, lo_it, hi_it = individual_effect_inference(res, None, j, t)
        k = t - cfg.T0
        lo_t, hi_t = res.ci_theta_t
        return {
            "err_it": est_it - cfg.theta,
            "cov_it": bool(lo_it <= cfg.theta <= hi_it),
            "err_t": float(res.theta_t[k] - cfg.theta),
            "cov_t": bool(lo_t[k] <= cfg.theta <= hi_t[k]),
        }


def run_table3(
    base: AttConfig | None = None, grid=None
) -> list[dict]:
    """Bias, RMSE and coverage for each ``(N1, N0, T0)`` in ``grid``."""
    base = AttConfig() if base is None else base
    grid = TABLE3_GRID if grid is None else grid
    rows = []
    for n1, n0, t0 in grid:
        cfg = replace(base, N1=n1, N0=n0, T0=t0)
        res = _map_reps(att_rep, cfg, cfg.reps)
        ok = [r for r in res if "error" not in r]
        row = {"N1": n1, "N0": n0, "T0": t0, "T1": cfg.T1}
        for key in ("it", "t"):
            e = np.array([r[f"err_{key}"] for r in ok])
            c = np.array([r[f"cov_{key}"] for r in ok])
            row[f"bias_{key}"] = float(e.mean()) if ok else float("nan")
            row[f"rmse_{key}"] = float(np.sqrt(np.mean(e**2))) if ok else float("nan")
            row[f"covr_{key}"] = float(c.mean()) if ok else float("nan")
        row["reps_ok"] = len(ok)
        row["reps_failed"] = len(res) - len(ok)
        rows.append(row)
    return rows


# output

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.10g}"
    return str(v)


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise InvalidInput("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([_fmt(v) for v in row.values()])


def package_version() -> str:
    try:
        return "v" + version("artifact")
    except PackageNotFoundError:
        return "v0+unknown"


def write_manifest(path, config: dict, wall_time: float, outputs: list[str]) -> None:
    doc = {
        "config": config,
        "version": package_version(),
        "wall_time_seconds": round(wall_time, 3),
        "workers": _workers(),
        "outputs": outputs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def config_dict(cfg) -> dict:
    return asdict(cfg)

