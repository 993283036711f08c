import numpy as np
import pytest

from fbitw.errors import InvalidInput
from fbitw.mc import (
    AttConfig,
    McConfig,
    apply_missing_case,
    block_midpoints,
    case_dims,
    draw_factor_panel,
    generate_att,
    generate_dgp,
    run_rep,
    simulate,
    table1_rows,
    table2_rows,
)
from fbitw.panel import BlockPartition, partition_blocks

from mc_cache import table1, table2


def test_noiseless_rank():
    d = generate_dgp(McConfig(N=30, T=40, noise_var=0.0, reps=1), 0)
    assert np.linalg.matrix_rank(d.X) == 2
    np.testing.assert_array_equal(d.X, d.C0)


def test_noise_variance():
    d = generate_dgp(McConfig(), 3)
    assert np.var(d.X - d.C0) == pytest.approx(2.5, abs=0.1)


def test_factor_variance():
    d = draw_factor_panel(2000, 5, (1.0, 0.5), 0.0, 0, 0)
    assert np.var(d.F0[:, 1]) == pytest.approx(0.5, abs=0.05)


def test_streams_are_keyed_by_rep():
    a = generate_dgp(McConfig(seed=4), 7).X
    generate_dgp(McConfig(seed=4), 2)
    assert np.array_equal(a, generate_dgp(McConfig(seed=4), 7).X)
    assert not np.array_equal(a, generate_dgp(McConfig(seed=4), 8).X)
    assert not np.array_equal(a, generate_dgp(McConfig(seed=5), 7).X)


@pytest.mark.parametrize("case,miss", [(1, (80, 80)), (2, (80, 140)), (3, (140, 80)), (4, (140, 140))])
def test_case_layouts(case, miss):
    X = generate_dgp(McConfig(reps=1), 0).X
    p = apply_missing_case(X, case)
    bp = partition_blocks(p)
    assert (bp.N_m, bp.T_m) == miss
    assert (~p.mask).sum() == miss[0] * miss[1]
    assert not p.mask[-1, -1] and p.mask[0, -1] and p.mask[-1, 0]


def test_custom_single_cell_case():
    p = apply_missing_case(np.ones((6, 5)), (4, 5))
    assert (~p.mask).sum() == 1 and not p.mask[5, 4]


def test_config_validation():
    with pytest.raises(InvalidInput):
        McConfig(reps=0)
    with pytest.raises(InvalidInput):
        McConfig(methods=("full", "magic"))
    with pytest.raises(InvalidInput):
        McConfig(case=5)
    with pytest.raises(InvalidInput):
        AttConfig(T1=3)
    assert case_dims(McConfig(case=2)) == (120, 60)


def test_midpoints_case1():
    mids = block_midpoints(BlockPartition.from_counts(200, 200, 120, 120))
    assert mids["miss"] == (159, 159) and mids["bal"] == (59, 59)


def test_run_rep_all_methods():
    cfg = McConfig(N=60, T=60, reps=1, methods=("full", "tw", "tw_updated", "em", "rpc"), scale_modes=(0, 2))
    out = run_rep(cfg, 0)
    assert set(out) == {(m, s) for m in cfg.methods for s in (0, 2)}
    for v in out.values():
        assert set(v["table"]) == {"full", "tall", "wide", "bal", "miss"}


def test_failed_reps_are_counted():
    # N_o = 1 breaks the order condition for r = 2
    cfg = McConfig(N=30, T=30, reps=2, case=(1, 20), methods=("full", "tw"))
    rows = {(r["block"], r["method"]): r for r in table1_rows(cfg, simulate(cfg))}
    assert rows[("miss", "tw")]["reps_failed"] == 2 and np.isnan(rows[("miss", "tw")]["median_error"])
    assert rows[("miss", "full")]["reps_ok"] == 2


def test_table2_rows_shape():
    cfg = McConfig(N=40, T=40, reps=3)
    rows = table2_rows(cfg, simulate(cfg))
    assert len(rows) == 4 * 4
    assert all(r["rmse"] >= 0 for r in rows)


def test_generate_att_layout():
    tp, C0 = generate_att(AttConfig(reps=1), 0)
    assert tp.Y.shape == (25, 45) and tp.T0 == 15
    assert tp.treated_idx[0] == 40


@pytest.mark.slow
def test_full_beats_tw_every_block():
    for case in (1, 2, 3, 4):
        t = table1(case, 500)
        for block in ("full", "tall", "wide", "bal", "miss"):
            assert t[(block, "full")]["median_error"] <= t[(block, "tw")]["median_error"]
        assert t[("bal", "tw_updated")]["median_error"] <= t[("bal", "tw")]["median_error"]


@pytest.mark.slow
def test_table2_case1_miss_cell():
    t = table2(1, 500)
    assert t[("miss", "full")]["rmse"] == pytest.approx(0.23, abs=0.03)
    assert t[("miss", "tw")]["rmse"] == pytest.approx(0.30, abs=0.03)
    assert t[("miss", "tw_updated")]["rmse"] == pytest.approx(0.27, abs=0.03)
