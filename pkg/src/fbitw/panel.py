"""Panel container, scaling, CSV I/O and the tall/wide block rearrangement.

Arrays are stored time-major: ``values[t, i]`` is series ``i`` at period ``t``.
All indices are 0-based in code; the CSV layout carries the labels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSeries,
    EmptySeries,
    InvalidInput,
    NoBalancedBlock,
    ParseError,
    StateError,
)

RAW, DEMEANED, STANDARDIZED = 0, 1, 2

BAL, TALL, WIDE, MISS = "BAL", "TALL", "WIDE", "MISS"
BLOCKS = (BAL, TALL, WIDE, MISS)


@dataclass(frozen=True, eq=False)
class ScaleStats:
    """Per-series affine map ``raw = mean + std * scaled``."""

    mode: int
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class Panel:
    values: np.ndarray
    mask: np.ndarray
    series_ids: tuple[str, ...]
    period_ids: tuple[str, ...]
    scale_mode: int = RAW
    scale_stats: ScaleStats | None = None

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise InvalidInput(
                f"values {self.values.shape} and mask {self.mask.shape} differ in shape"
            )
        T, N = self.values.shape
        if len(self.series_ids) != N or len(self.period_ids) != T:
            raise InvalidInput("label counts do not match the matrix shape")
        empty = np.flatnonzero(~self.mask.any(axis=0))
        if empty.size:
            raise EmptySeries(
                f"series {self.series_ids[empty[0]]!r} has no observed entries"
            )
        if not np.all(np.isfinite(self.values[self.mask])):
            raise InvalidInput("observed entries must be finite")

    @classmethod
    def from_array(
        cls,
        values,
        mask=None,
        series_ids: Sequence[str] | None = None,
        period_ids: Sequence[str] | None = None,
    ) -> "Panel":
        """Build a panel; ``mask`` defaults to the finite entries of ``values``."""
        values = np.array(values, dtype=float)
        if values.ndim != 2:
            raise InvalidInput(f"expected a T x N matrix, got shape {values.shape}")
        mask = np.isfinite(values) if mask is None else np.array(mask, dtype=bool)
        values = np.where(mask, values, np.nan)
        T, N = values.shape
        series_ids = tuple(str(s) for s in series_ids) if series_ids is not None else tuple(
            f"s{i + 1}" for i in range(N)
        )
        period_ids = tuple(str(s) for s in period_ids) if period_ids is not None else tuple(
            str(t + 1) for t in range(T)
        )
        return cls(values=values, mask=mask, series_ids=series_ids, period_ids=period_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())


def load_csv(path, missing_sentinel: str = "NA") -> Panel:
    """Read a panel: header row holds series ids, first column period ids.

    Cells equal to ``missing_sentinel`` or empty are unobserved.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one data row")
    header = rows[0]
    N = len(header) - 1
    if N < 1:
        raise ParseError(f"{path}: no series columns")
    period_ids, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != N + 1:
            raise ParseError(f"{path}:{lineno}: expected {N + 1} fields, got {len(row)}")
        period_ids.append(row[0].strip())
        parsed = []
        for cell in row[1:]:
            cell = cell.strip()
            if cell == "" or cell == missing_sentinel:
                parsed.append(np.nan)
                continue
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {cell!r}") from None
        data.append(parsed)
    values = np.array(data, dtype=float)
    mask = np.isfinite(values)
    return Panel.from_array(values, mask, [h.strip() for h in header[1:]], period_ids)


def write_csv(
    path,
    matrix: np.ndarray,
    series_ids: Sequence[str],
    period_ids: Sequence[str],
    mask: np.ndarray | None = None,
    missing_sentinel: str = "NA",
) -> None:
    """Write a T x N matrix in the :func:`load_csv` layout with 12 significant digits."""
    matrix = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", *series_ids])
        for t, pid in enumerate(period_ids):
            row = matrix[t]
            keep = np.ones(row.shape, bool) if mask is None else mask[t]
            w.writerow([pid, *(f"{v:.12g}" if k else missing_sentinel for v, k in zip(row, keep))])


def rescale(p: Panel, mode: int) -> Panel:
    """Demean (mode 1) or standardize (mode 2) each series on its observed entries.

    The standard deviation uses denominator ``n - 1``.  Mode 0 returns the
    values unchanged but still attaches identity statistics.
    """
    if mode not in (RAW, DEMEANED, STANDARDIZED):
        raise InvalidInput(f"scale mode must be 0, 1 or 2, got {mode!r}")
    if p.scale_mode != RAW:
        raise StateError("panel is already scaled; unscale it first")
    X = np.where(p.mask, p.values, 0.0)
    n = p.mask.sum(axis=0)
    mean = np.zeros(p.N)
    std = np.ones(p.N)
    if mode >= DEMEANED:
        mean = X.sum(axis=0) / n
    if mode == STANDARDIZED:
        if np.any(n < 2):
            bad = p.series_ids[int(np.flatnonzero(n < 2)[0])]
            raise DegenerateSeries(f"series {bad!r} has fewer than 2 observations")
        dev = np.where(p.mask, p.values - mean, 0.0)
        std = np.sqrt((dev**2).sum(axis=0) / (n - 1))
        if np.any(std <= 0):
            bad = p.series_ids[int(np.flatnonzero(std <= 0)[0])]
            raise DegenerateSeries(f"series {bad!r} is constant on its observed entries")
    stats = ScaleStats(mode=mode, mean=mean, std=std)
    values = np.where(p.mask, (p.values - mean) / std, np.nan)
    return replace(p, values=values, scale_mode=mode, scale_stats=stats)


def unscale(x, stats: ScaleStats | None = None):
    """Map scaled values (a :class:`Panel` or a T x N array) back to raw units."""
    if isinstance(x, Panel):
        stats = x.scale_stats if stats is None else stats
        if stats is None:
            if x.scale_mode == RAW:
                return x
            raise StateError("panel carries no scale statistics")
        values = np.where(x.mask, x.values * stats.std + stats.mean, np.nan)
        return replace(x, values=values, scale_mode=RAW, scale_stats=None)
    if stats is None:
        raise StateError("scale statistics are required to unscale a matrix")
    return np.asarray(x, dtype=float) * stats.std + stats.mean


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Row/column permutations placing fully observed series and periods first.

    After permutation, columns ``[:N_o]`` are observed at every period and rows
    ``[:T_o]`` are observed for every series.
    """

    row_perm: np.ndarray
    col_perm: np.ndarray
    T_o: int
    N_o: int

    @classmethod
    def from_counts(cls, T: int, N: int, T_o: int, N_o: int) -> "BlockPartition":
        """Identity permutations with the given balanced-block size."""
        return cls(np.arange(T), np.arange(N), int(T_o), int(N_o))

    @property
    def T(self) -> int:
        return len(self.row_perm)

    @property
    def N(self) -> int:
        return len(self.col_perm)

    @property
    def T_m(self) -> int:
        return self.T - self.T_o

    @property
    def N_m(self) -> int:
        return self.N - self.N_o

    @property
    def rows_o(self) -> np.ndarray:
        return self.row_perm[: self.T_o]

    @property
    def rows_m(self) -> np.ndarray:
        return self.row_perm[self.T_o :]

    @property
    def cols_o(self) -> np.ndarray:
        return self.col_perm[: self.N_o]

    @property
    def cols_m(self) -> np.ndarray:
        return self.col_perm[self.N_o :]

    def permute(self, A: np.ndarray) -> np.ndarray:
        return np.asarray(A)[self.row_perm][:, self.col_perm]

    def unpermute(self, B: np.ndarray) -> np.ndarray:
        out = np.empty_like(B)
        out[np.ix_(self.row_perm, self.col_perm)] = B
        return out

    def row_is_o(self) -> np.ndarray:
        flag = np.zeros(self.T, bool)
        flag[self.rows_o] = True
        return flag

    def col_is_o(self) -> np.ndarray:
        flag = np.zeros(self.N, bool)
        flag[self.cols_o] = True
        return flag

    def labels(self) -> np.ndarray:
        """T x N array of block labels in original coordinates."""
        ro = self.row_is_o()[:, None]
        co = self.col_is_o()[None, :]
        return np.where(ro, np.where(co, BAL, WIDE), np.where(co, TALL, MISS))

    def label_at(self, i: int, t: int) -> str:
        """Label of series ``i`` at period ``t`` (original coordinates)."""
        ro = bool(self.row_is_o()[t])
        co = bool(self.col_is_o()[i])
        if ro:
            return BAL if co else WIDE
        return TALL if co else MISS

    def block_mask(self, label: str) -> np.ndarray:
        return self.labels() == label


def partition_blocks(p: Panel) -> BlockPartition:
    """Stable two-pass shuffle: fully observed columns first, then fully observed rows."""
    full_cols = p.mask.all(axis=0)
    full_rows = p.mask.all(axis=1)
    N_o = int(full_cols.sum())
    T_o = int(full_rows.sum())
    if N_o == 0:
        raise NoBalancedBlock("NoBalancedBlock: no series is observed at every period")
    if T_o == 0:
        raise NoBalancedBlock("NoBalancedBlock: no period is observed for every series")
    col_perm = np.argsort(~full_cols, kind="stable")
    row_perm = np.argsort(~full_rows, kind="stable")
    return BlockPartition(row_perm=row_perm, col_perm=col_perm, T_o=T_o, N_o=N_o)


@dataclass(frozen=True)
class OrderReport:
    ok: bool
    tall_ok: bool
    wide_ok: bool
    message: str

    def __bool__(self) -> bool:
        return self.ok


def order_conditions(T: int, N: int, T_o: int, N_o: int, r: int) -> OrderReport:
    tall_ok = T * N_o > r * (T + N_o)
    wide_ok = T_o * N > r * (T_o + N)
    msgs = []
    if not tall_ok:
        msgs.append(f"TALL: T*N_o = {T * N_o} <= r(T+N_o) = {r * (T + N_o)}")
    if not wide_ok:
        msgs.append(f"WIDE: T_o*N = {T_o * N} <= r(T_o+N) = {r * (T_o + N)}")
    return OrderReport(tall_ok and wide_ok, tall_ok, wide_ok, "; ".join(msgs) or "ok")


def check_order_conditions(bp: BlockPartition, r: int) -> OrderReport:
    """Check ``T N_o > r (T + N_o)`` and ``T_o N > r (T_o + N)`` (strict)."""
    if r < 1:
        raise InvalidInput(f"rank must be >= 1, got {r}")
    return order_conditions(bp.T, bp.N, bp.T_o, bp.N_o, r)


def observed_values(p: Panel) -> np.ndarray:
    """Values with unobserved cells set to zero (handy for masked arithmetic)."""
    return np.where(p.mask, p.values, 0.0)


def read_assignment(path) -> dict[str, bool]:
    """Read ``unit_id,treated`` rows (header optional) into a dict."""
    out: dict[str, bool] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'unit_id,treated'")
            unit, flag = row[0].strip(), row[1].strip()
            if flag not in ("0", "1"):
                if lineno == 1:
                    continue
                raise ParseError(f"{path}:{lineno}: treated must be 0 or 1, got {flag!r}")
            out[unit] = flag == "1"
    return out

