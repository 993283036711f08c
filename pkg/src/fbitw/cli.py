"""Command-line entry point: ``fbitw impute | att | simulate``.

Exit codes: 0 success, 2 bad input, 3 estimation failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .em import impute_em
from .errors import EstimationError, FbiError, InputError, InvalidInput, ParseError
from .mc import (
    AttConfig,
    McConfig,
    TABLE3_GRID,
    config_dict,
    run_table3,
    simulate,
    table1_rows,
    table2_rows,
    write_manifest,
    write_rows,
)
from .panel import RAW, load_csv, partition_blocks, read_assignment, rescale, unscale, write_csv
from .refit import (
    estimate_variance_components,
    normal_quantile,
    panel_inference,
    reestimate,
    update,
)
from .treatment import TreatmentPanel, att_tw
from .tw import impute_tw

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _rank(text: str):
    if text == "auto":
        return "auto"
    try:
        r = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}")
    if r < 1:
        raise argparse.ArgumentTypeError("rank must be >= 1")
    return r


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _level(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("confidence level must lie in (0, 1)")
    return v


def _write_table(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


# impute

def cmd_impute(args) -> int:
    raw = load_csv(args.input, missing_sentinel=args.missing)
    p = rescale(raw, args.scale) if args.scale != RAW else raw
    bp = partition_blocks(p)
    fm = None
    if args.method == "em":
        ip, info = impute_em(p, args.r)
        fm = info.model
        if not info.converged:
            print(f"warning: EM stopped after {info.iterations} iterations without converging",
                  file=sys.stderr)
    else:
        ip, _ = impute_tw(p, args.r, bp, shrink=args.shrink if args.method == "rpc" else None)
        if args.method == "tw-updated":
            ip, fm = update(ip)
        elif args.method == "tw":
            fm = reestimate(ip)

    stats = p.scale_stats if args.scale != RAW else None
    C = ip.C_tilde if stats is None else unscale(ip.C_tilde, stats)
    X = np.where(raw.mask, raw.values, C)
    prefix = args.out
    write_csv(f"{prefix}_xtilde.csv", X, raw.series_ids, raw.period_ids)
    write_csv(f"{prefix}_chat.csv", C, raw.series_ids, raw.period_ids)

    header = ["i", "t", "block", "delta", "C_hat", "se", "ci_low", "ci_high"]
    T, N = raw.shape
    if fm is not None:
        vc = estimate_variance_components(fm, ip, bp, args.hac_lags)
        inf = panel_inference(
            fm, vc, bp, args.ci, stationary=args.stationary,
            updated=args.method != "tw", C_hat=ip.C_tilde,
        )
        scale = np.ones(N) if stats is None else stats.std
        se = inf.se * scale
        z = normal_quantile(0.5 + args.ci / 2.0)
        rows = (
            (raw.series_ids[i], raw.period_ids[t], str(inf.labels[t, i]), float(inf.delta[t, i]),
             float(C[t, i]), float(se[t, i]), float(C[t, i] - z * se[t, i]),
             float(C[t, i] + z * se[t, i]))
            for t in range(T) for i in range(N)
        )
    else:
        rows = (
            (raw.series_ids[i], raw.period_ids[t], str(ip.block_label[t, i]),
             float(ip.delta[t, i]), float(C[t, i]), "NA", "NA", "NA")
            for t in range(T) for i in range(N)
        )
    _write_table(Path(f"{prefix}_inference.csv"), header, rows)
    return EXIT_OK


# att

def _read_covariates(path, unit_ids, period_ids) -> np.ndarray:
    """Long CSV ``period,unit_id,x1,...,xK`` covering every unit and period."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2 or len(rows[0]) < 3:
        raise ParseError(f"{path}: expected header 'period,unit_id,x1,...'")
    K = len(rows[0]) - 2
    t_pos = {p: k for k, p in enumerate(period_ids)}
    i_pos = {u: k for k, u in enumerate(unit_ids)}
    out = np.full((len(period_ids), len(unit_ids), K), np.nan)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != K + 2:
            raise ParseError(f"{path}:{lineno}: expected {K + 2} fields")
        t, u = row[0].strip(), row[1].strip()
        if t not in t_pos or u not in i_pos:
            raise InvalidInput(f"{path}:{lineno}: unknown period {t!r} or unit {u!r}")
        try:
            out[t_pos[t], i_pos[u]] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if np.isnan(out).any():
        raise InvalidInput(f"{path}: covariates missing for some unit/period pairs")
    return out


def cmd_att(args) -> int:
    panel = load_csv(args.outcomes)
    assign = read_assignment(args.assign)
    ids = set(panel.series_ids)
    if set(assign) != ids:
        extra = sorted(set(assign) ^ ids)
        raise InvalidInput(f"unit ids differ between outcomes and assignment: {extra[:5]}")
    if not panel.complete:
        raise InvalidInput("outcome panel must have no missing values")
    treated = np.array([assign[u] for u in panel.series_ids])
    X_cov = None
    if args.covariates:
        X_cov = _read_covariates(args.covariates, panel.series_ids, panel.period_ids)
    tp = TreatmentPanel.build(panel.values, treated, args.t0, X_cov,
                              unit_ids=panel.series_ids, period_ids=panel.period_ids)
    res = att_tw(tp, args.r, use_refit=args.refit, level=args.ci, stationary=args.stationary)
    prefix = args.out
    pids = panel.period_ids[tp.T0:]
    lo, hi = res.ci_theta_t
    _write_table(Path(f"{prefix}_effects.csv"), ["t", "theta_t", "se", "ci_low", "ci_high"],
                 [(pids[k], float(res.theta_t[k]), float(res.se_theta_t[k]), float(lo[k]), float(hi[k]))
                  for k in range(len(pids))])
    lo, hi = res.ci_theta_j
    uids = [panel.series_ids[j] for j in res.treated_idx]
    _write_table(Path(f"{prefix}_units.csv"), ["unit_id", "theta_j", "se", "ci_low", "ci_high"],
                 [(u, float(res.theta_j[k]), float(res.se_theta_j[k]), float(lo[k]), float(hi[k]))
                  for k, u in enumerate(uids)])
    lo, hi = res.ci_theta_it
    _write_table(Path(f"{prefix}_individual.csv"),
                 ["unit_id", "t", "theta", "se", "ci_low", "ci_high"],
                 [(u, pids[s], float(res.theta_it[s, k]), float(res.se_theta_it[s, k]),
                   float(lo[s, k]), float(hi[s, k]))
                  for s in range(len(pids)) for k, u in enumerate(uids)])
    if res.beta_hat.size:
        _write_table(Path(f"{prefix}_beta.csv"), ["k", "beta"],
                     [(k + 1, float(b)) for k, b in enumerate(res.beta_hat)])
    return EXIT_OK


# simulate

def _parse_grid(text: str):
    try:
        grid = [tuple(int(x) for x in part.split(",")) for part in text.split(";") if part]
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like '5,40,15;20,200,100'")
    if not grid or any(len(g) != 3 for g in grid):
        raise argparse.ArgumentTypeError("grid must look like '5,40,15;20,200,100'")
    return tuple(grid)


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    out_csv = f"{args.out}_table{args.table}.csv"
    if args.table == 3:
        base = AttConfig(reps=args.reps, seed=args.seed, T1=args.t1)
        grid = args.grid or TABLE3_GRID
        rows = run_table3(base, grid)
        config = {**config_dict(base), "grid": [list(g) for g in grid], "table": 3}
    else:
        cases = (1, 2, 3, 4) if args.case == "all" else (int(args.case),)
        rows, configs = [], []
        for case in cases:
            cfg = McConfig(reps=args.reps, seed=args.seed, case=case,
                           methods=tuple(args.methods), scale_modes=tuple(args.scales))
            results = simulate(cfg)
            rows += table1_rows(cfg, results) if args.table == 1 else table2_rows(cfg, results)
            configs.append(config_dict(cfg))
        config = {"table": args.table, "runs": configs}
    write_rows(out_csv, rows)
    write_manifest(f"{args.out}_manifest.json", config, time.perf_counter() - start, [out_csv])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fbitw", description="Tall-wide factor imputation of panel data.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("impute", help="impute missing cells and report standard errors")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=["tw", "tw-updated", "em", "rpc"], default="tw-updated")
    p.add_argument("--r", type=_rank, default="auto")
    p.add_argument("--scale", type=int, choices=[0, 1, 2], default=0)
    p.add_argument("--ci", type=_level, default=0.95)
    p.add_argument("--hac-lags", type=int, default=0)
    p.add_argument("--stationary", type=_bool, default=True)
    p.add_argument("--shrink", type=float, default=0.1,
                   help="soft threshold as a fraction of the top singular value (rpc)")
    p.add_argument("--missing", default="NA", help="token marking a missing cell")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    a = sub.add_parser("att", help="treatment effects on the treated")
    a.add_argument("--outcomes", required=True)
    a.add_argument("--assign", required=True)
    a.add_argument("--t0", type=int, required=True, help="number of pre-treatment periods")
    a.add_argument("--r", type=_rank, default="auto")
    a.add_argument("--covariates")
    a.add_argument("--refit", type=_bool, default=True)
    a.add_argument("--ci", type=_level, default=0.95)
    a.add_argument("--stationary", type=_bool, default=True)
    a.add_argument("--out", default="att")
    a.set_defaults(func=cmd_att)

    s = sub.add_parser("simulate", help="Monte Carlo tables")
    s.add_argument("--table", type=int, choices=[1, 2, 3], required=True)
    s.add_argument("--case", choices=["1", "2", "3", "4", "all"], default="1")
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--methods", nargs="+", default=["full", "tw", "tw_updated", "em"],
                   choices=["full", "tw", "tw_updated", "em", "rpc"])
    s.add_argument("--scales", nargs="+", type=int, default=[0], choices=[0, 1, 2])
    s.add_argument("--t1", type=int, default=10, help="post-treatment periods (table 3)")
    s.add_argument("--grid", type=_parse_grid, help="table 3 rows as 'N1,N0,T0;...'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except InputError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except FbiError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
