import numpy as np
import pytest

from fbitw.apc import estimate_apc
from fbitw.errors import DegenerateDof, InvalidInput
from fbitw.mc import AttConfig, generate_att
from fbitw.panel import Panel
from fbitw.treatment import (
    TreatmentPanel,
    att_tw,
    att_variance,
    att_variance_t,
    estimate_ife_beta,
    individual_effect_inference,
    individual_variance_terms,
    residual_dof,
    sigma_e_hat,
    unit_average_effect_inference,
)
from fbitw.tw import impute_tw

from mc_cache import table3_row
from oracles import factor_panel


def treated_panel(rng, T=30, N0=25, N1=4, T0=20, noise=0.0, theta=1.0, r=2):
    Y, C, F, L = factor_panel(T, N0 + N1, r, rng, noise=noise)
    treated = np.r_[np.zeros(N0, bool), np.ones(N1, bool)]
    Y[T0:, N0:] += theta
    return TreatmentPanel.build(Y, treated, T0), C


def test_panel_validation(rng):
    Y = rng.standard_normal((6, 4))
    with pytest.raises(InvalidInput):
        TreatmentPanel.build(Y, [0, 0, 1, 1], [3, 3, 3, 4])
    with pytest.raises(InvalidInput):
        TreatmentPanel.build(Y, [0, 0, 0, 0], 3)
    with pytest.raises(InvalidInput):
        TreatmentPanel.build(Y, [0, 0, 1, 1], 6)
    tp = TreatmentPanel.build(Y, [0, 1, 0, 1], [3, 3, 3, 3])
    assert (tp.N0, tp.N1, tp.T1, tp.K) == (2, 2, 3, 0)


def test_ife_without_covariates(rng):
    tp, _ = treated_panel(rng)
    ife = estimate_ife_beta(tp, 2)
    assert ife.beta.size == 0 and ife.converged


def test_ife_exact_with_orthogonal_covariates(rng):
    Y, C, F, _ = factor_panel(30, 20, 2, rng)
    M = np.eye(30) - F @ np.linalg.pinv(F)
    Xc = np.stack([M @ rng.standard_normal((30, 20)) for _ in range(2)], axis=2)
    beta = np.array([0.7, -1.3])
    Y = C + Xc @ beta
    tp = TreatmentPanel.build(Y, np.r_[np.zeros(16, bool), np.ones(4, bool)], 20, X_cov=Xc)
    ife = estimate_ife_beta(tp, 2)
    np.testing.assert_allclose(ife.beta, beta, atol=1e-8)
    res = att_tw(tp, 2)
    np.testing.assert_allclose(res.theta_it, 0.0, atol=1e-7)


@pytest.mark.slow
def test_ife_null_beta_recovery():
    est = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        Y, _, _, _ = factor_panel(30, 25, 2, rng, noise=1.0)
        Xc = rng.standard_normal((30, 25, 1))
        tp = TreatmentPanel.build(Y, np.r_[np.zeros(20, bool), np.ones(5, bool)], 20, X_cov=Xc)
        est.append(estimate_ife_beta(tp, 2).beta[0])
    est = np.array(est)
    assert abs(est.mean()) <= 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_noiseless_effects_exact(rng):
    tp, _ = treated_panel(rng)
    res = att_tw(tp, 2)
    np.testing.assert_allclose(res.theta_it, 1.0, atol=1e-8)
    np.testing.assert_allclose(res.theta_j, 1.0, atol=1e-8)
    est, V, se, lo, hi = unit_average_effect_inference(res, None, tp.treated_idx[0])
    assert est == pytest.approx(1.0, abs=1e-8)
    assert individual_effect_inference(res, None, tp.treated_idx[0], tp.T0)[1] < 1e-6
    V_t, _, se_t, lo_t, hi_t = att_variance_t(res, None, tp.T0)
    assert hi_t - lo_t < 1e-6


def test_null_effect_within_three_se(rng):
    tp, _ = treated_panel(rng, T=60, N0=80, N1=10, T0=40, noise=1.0, theta=0.0)
    res = att_tw(tp, 2)
    assert np.all(np.abs(res.theta_t) <= 3 * res.se_theta_t)


def test_definitional_and_equivariance(rng):
    tp, _ = treated_panel(rng, noise=0.5)
    res = att_tw(tp, 2)
    np.testing.assert_array_equal(res.theta_t, res.theta_it.mean(axis=1))
    Y2 = tp.Y.copy()
    Y2[tp.T0:, tp.treated_idx] += 2.5
    res2 = att_tw(TreatmentPanel.build(Y2, tp.treated, tp.T0), 2)
    np.testing.assert_allclose(res2.theta_it - res.theta_it, 2.5, atol=1e-10)
    np.testing.assert_allclose(res2.theta_t - res.theta_t, 2.5, atol=1e-10)
    assert np.all(res.se_theta_t > 0) and np.all(res.se_theta_it > 0) and np.all(res.se_theta_j > 0)


def test_pipeline_matches_generic_tw(rng):
    tp, _ = treated_panel(rng, noise=0.5)
    res = att_tw(tp, 2, use_refit=False)
    mask = np.ones(tp.Y.shape, bool)
    mask[tp.T0:, tp.N0:] = False
    ip, _ = impute_tw(Panel.from_array(tp.Y, mask), 2)
    np.testing.assert_array_equal(res.C_hat, ip.C_tilde)


def test_vectorized_se_matches_scalar(rng):
    tp, _ = treated_panel(rng, noise=0.5)
    for stationary in (True, False):
        res = att_tw(tp, 2, stationary=stationary)
        for k, j in enumerate(tp.treated_idx):
            for t in (tp.T0, tp.T0 + 3):
                se = individual_effect_inference(res, None, j, t)[1]
                assert res.se_theta_it[t - tp.T0, k] == pytest.approx(se, rel=1e-12)
            assert res.se_theta_j[k] == pytest.approx(unit_average_effect_inference(res, None, j)[2])
        assert res.se_theta_t[2] == pytest.approx(att_variance_t(res, None, tp.T0 + 2)[2])


def test_sigma_e_hat():
    assert sigma_e_hat(np.zeros((10, 5)), 1) == 0.0
    assert residual_dof(200, 40, 2, 0) == 7524
    with pytest.raises(DegenerateDof):
        sigma_e_hat(np.ones((2, 2)), 2)


def test_sigma_e_hat_consistency(rng):
    X, _, _, _ = factor_panel(200, 40, 2, rng, noise=np.sqrt(2.5))
    resid = X - estimate_apc(X, 2).common()
    assert sigma_e_hat(resid, 2) == pytest.approx(2.5, abs=0.15)


def test_att_variance_closed_form():
    V, delta, se = att_variance(np.ones(1), np.eye(1), np.array([[0.8]]), 0.3, 25, 25)
    assert V == pytest.approx(1.1) and delta == 5.0
    assert att_variance(np.ones(1), np.eye(1), np.zeros((1, 1)), 0.0, 9, 4)[2] == 0.0


def test_unit_average_delta(rng):
    tp, _ = treated_panel(rng, T=200, N0=30, N1=2, T0=15, noise=1.0)
    res = att_tw(tp, 2)
    _, V, se, _, _ = unit_average_effect_inference(res, None, tp.treated_idx[0])
    assert V == pytest.approx(15 * se**2)
    with pytest.raises(InvalidInput):
        unit_average_effect_inference(res, None, 0)


def test_idiosyncratic_term_dominates():
    tp, _ = generate_att(AttConfig(N1=5, N0=200, T0=200, T1=10, reps=1), 0)
    res = att_tw(tp, 2)
    f, l, e = individual_variance_terms(res, 200, 204)
    assert e / (f + l + e) > 0.8


@pytest.mark.slow
def test_table3_row1_theta_t():
    row = table3_row(5, 40, 15)
    assert row["rmse_t"] == pytest.approx(0.504, abs=0.05)
    assert row["covr_t"] == pytest.approx(0.931, abs=0.03)


@pytest.mark.slow
def test_table3_last_row_theta_t_coverage():
    assert table3_row(20, 200, 100)["covr_t"] == pytest.approx(0.964, abs=0.03)


@pytest.mark.slow
def test_table3_row1_theta_it_rmse():
    assert table3_row(5, 40, 15)["rmse_it"] == pytest.approx(1.117, abs=0.08)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="individual-effect coverage is about 0.91 here; see decisions ledger")
def test_table3_row1_theta_it_coverage():
    assert table3_row(5, 40, 15)["covr_it"] == pytest.approx(0.967, abs=0.03)


@pytest.mark.slow
def test_unit_average_coverage():
    cfg = AttConfig(N1=5, N0=200, T0=100, T1=100, reps=1)
    hits = []
    for rep in range(1000):
        tp, _ = generate_att(cfg, rep)
        res = att_tw(tp, 2)
        lo, hi = res.ci_theta_j
        hits.append(bool(lo[0] <= 1.0 <= hi[0]))
    assert np.mean(hits) == pytest.approx(0.95, abs=0.04)
