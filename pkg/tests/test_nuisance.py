from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsm.crossfit import make_folds
from lmsm.errors import ContractError
from lmsm.learners import LearnerSpec
from lmsm.msm import FixedReference
from lmsm.nuisance import (NuisanceSet, density_ratio, fit_ratios, fit_treatment_pmf,
                           integrate_tbar, pmf_design, pseudo_outcome, sequential_fit)

from conftest import slope_model

CELL = LearnerSpec("cell_mean")
MEAN = LearnerSpec("mean")


def test_density_ratio_examples():
    assert density_ratio(0.3, 0.3) == pytest.approx(1.0)
    assert density_ratio(0.2, 0.5) == pytest.approx(0.4)
    assert density_ratio(0.2, 1e-12, c=100) == 100.0
    assert density_ratio(0.2, 0.0, c=100) == 100.0


def test_integrate_tbar_examples():
    assert integrate_tbar([0.2, 0.6], [0.5, 0.5]) == pytest.approx(0.4)
    assert integrate_tbar([7.0, 8.0, 9.0, 10.0], [0, 0, 0, 1.0]) == 10.0
    assert integrate_tbar([1, 2, 3, 4, 5], [.1, .2, .3, .2, .2]) == pytest.approx(3.2)
    vals = np.arange(12.0).reshape(2, 3, 2)
    lam = np.array([[1, 0, 0], [0, 0.5, 0.5]])
    np.testing.assert_allclose(integrate_tbar(vals, lam), [[0, 1], [9, 10]])


def test_pseudo_outcome_single_time():
    assert pseudo_outcome([2.0], [[0.6]], [[0.5], [1.0]], 1)[0] == pytest.approx(1.3)


def test_pseudo_outcome_two_times():
    r, t_obs, t_bar = [2.0, 0.5], [[0.3], [0.5]], [[0.4], [0.6], [1.0]]
    # 0.4 + 2 (0.6 - 0.3) + 2 * 0.5 (1.0 - 0.5)
    assert pseudo_outcome(r, t_obs, t_bar, 1)[0] == pytest.approx(1.5)
    assert pseudo_outcome(r, t_obs, t_bar, 2)[0] == pytest.approx(0.85)
    assert pseudo_outcome(r, t_obs, t_bar, 3)[0] == pytest.approx(1.0)
    with pytest.raises(ContractError):
        pseudo_outcome(r, t_obs, t_bar, 4)


def test_telescoping():
    tb = np.array([[0.3, 1.0], [0.7, 2.0], [0.2, 0.5], [0.9, 1.5]])
    got = pseudo_outcome([1, 1, 1], tb[1:], tb, 1)
    np.testing.assert_allclose(got, tb[0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 10**6))
def test_recursion_matches_explicit_sum(tau, d, seed):
    rng = np.random.default_rng(seed)
    n = 6
    ratios = rng.uniform(0, 3, size=(n, tau))
    t_obs = {t: rng.normal(size=(n, d)) for t in range(1, tau + 1)}
    t_bar = {t: rng.normal(size=(n, d)) for t in range(1, tau + 2)}
    ns = NuisanceSet(ratios, t_obs, t_bar, "sdr")
    for t in range(1, tau + 2):
        D = ns.pseudo(t)
        for i in range(n):
            exp = pseudo_outcome(ratios[i], np.array([t_obs[s][i] for s in range(1, tau + 1)]),
                                 np.array([t_bar[s][i] for s in range(1, tau + 2)]), t)
            np.testing.assert_allclose(D[i], exp, rtol=1e-12, atol=1e-12)


def test_intercept_only_pmf_reproduces_frequencies(toy2):
    ds = toy2.draw(500, 1)
    f = fit_treatment_pmf(ds, 2, LearnerSpec("mean"))
    freq = np.bincount(ds.treatments[:, 1], minlength=2) / 500
    np.testing.assert_allclose(f.predict_pmf(pmf_design(ds, 2))[0], freq, atol=1e-12)
    with pytest.raises(ContractError):
        fit_treatment_pmf(ds, 1, LearnerSpec("mean"), train_rows=[])


def test_softmax_recovers_true_pmf_at_large_n(toy2, toy2_truth):
    ds = toy2.draw(100_000, 2)
    for t in (1, 2):
        f = fit_treatment_pmf(ds, t, LearnerSpec("multinomial_softmax", {"lam": 1e-4, "interactions": True}))
        np.testing.assert_allclose(f.predict_pmf(pmf_design(ds, t)), toy2_truth.g_at(ds, t), atol=0.01)


def test_ratios_bounded_and_counted(ref_cfg):
    ds = ref_cfg.draw(400, 3)
    lam = FixedReference(ds.support, [[0.96, .01, .01, .01, .01]] * 4)
    rs = fit_ratios(ds, lam, [LearnerSpec("cell_mean")] * 4, make_folds(400, 2, 0), c=5.0)
    assert np.all((rs.ratios >= 0) & (rs.ratios <= 5.0))
    assert rs.truncated.sum() > 0


def test_plain_mode_saturated_matches_cell_means(toy1):
    ds = toy1.draw(3000, 4)
    model = slope_model(1)
    lam = FixedReference(ds.support, [[0.3, 0.7]])
    nuis = sequential_fit(ds, lam, model, None, [CELL], mode="plain")
    L, A = ds.covariates[0][:, 0], ds.treatments[:, 0]
    Yphi = ds.outcome[:, None] * model.phi(ds.treatments, ds.baseline)
    expected = np.zeros((ds.n, 2))
    for l in (0, 1):
        for a, w in ((0, 0.3), (1, 0.7)):
            expected[L == l] += w * Yphi[(L == l) & (A == a)].mean(axis=0)
    np.testing.assert_allclose(nuis.t_bar[1], expected, atol=1e-10)


def test_plain_mode_mean_learners_constant(toy2):
    ds = toy2.draw(200, 5)
    nuis = sequential_fit(ds, FixedReference(ds.support, [[.5, .5]] * 2), slope_model(2), None,
                          [MEAN, MEAN], mode="plain")
    assert np.ptp(nuis.t_bar[1], axis=0).max() < 1e-12


def test_sdr_needs_ratios(toy2):
    ds = toy2.draw(50, 0)
    with pytest.raises(ContractError):
        sequential_fit(ds, FixedReference(ds.support, [[.5, .5]] * 2), slope_model(2), None, [MEAN] * 2)
    with pytest.raises(ContractError):
        sequential_fit(ds, FixedReference(ds.support, [[.5, .5]] * 2), slope_model(2), None, [MEAN] * 2,
                       mode="bogus")


def test_fold_hygiene_instrumentation(toy2, toy2_truth):
    ds = toy2.draw(300, 6)
    fa = make_folds(300, 5, 1)
    r = toy2_truth.true_ratios(ds)
    crossfit = sequential_fit(ds, toy2_truth.lam, toy2_truth.model, r, [CELL] * 2, folds=fa)
    assert crossfit.check_fold_hygiene()
    pooled = sequential_fit(ds, toy2_truth.lam, toy2_truth.model, r, [CELL] * 2)
    assert not pooled.check_fold_hygiene()


def test_sdr_with_true_ratios_recovers_true_t(toy2, toy2_truth):
    ds = toy2.draw(100_000, 7)
    r = toy2_truth.true_ratios(ds)
    nuis = sequential_fit(ds, toy2_truth.lam, toy2_truth.model, r, [CELL] * 2,
                          folds=make_folds(ds.n, 2, 0))
    for t in (1, 2):
        err = np.abs(nuis.t_obs[t] - toy2_truth.t_at(ds, t))
        assert err.mean() < 0.01 and err.max() < 0.06
        err = np.abs(nuis.t_bar[t] - toy2_truth.tbar_at(ds, t))
        assert err.mean() < 0.01 and err.max() < 0.06


def _remainder_z(ds, an, ratios, t_obs, t_bar):
    """Max |cell mean of D_2 - T_1| over (L_1, A_1) cells, in standard errors."""
    D2 = NuisanceSet(ratios, t_obs, t_bar, "sdr").pseudo(2)
    T1 = an.t_at(ds, 1)
    key = ds.covariates[0][:, 0] * 2 + ds.treatments[:, 0]
    z = 0.0
    for k in np.unique(key):
        m = key == k
        diff = D2[m] - T1[m]
        z = max(z, float(np.max(np.abs(diff.mean(axis=0)) / (diff.std(axis=0) / np.sqrt(m.sum())))))
    return z


def test_remainder_vanishes_when_either_nuisance_is_true(toy2, toy2_truth):
    an = toy2_truth
    ds = toy2.draw(200_000, 8)
    true = an.nuisance_set(ds)
    bad_r = np.ones_like(true.ratios)
    bad_obs = {t: 0.5 * v + 0.1 for t, v in true.t_obs.items()}
    bad_bar = {t: (0.5 * v + 0.1 if t <= 2 else v) for t, v in true.t_bar.items()}
    # T_2 true, r_2 wrong
    assert _remainder_z(ds, an, bad_r, true.t_obs, true.t_bar) < 4.0
    # r_2 true, T_2 wrong
    assert _remainder_z(ds, an, true.ratios, bad_obs, bad_bar) < 4.0
    # both wrong: the remainder is visible
    assert _remainder_z(ds, an, bad_r, bad_obs, bad_bar) > 8.0
