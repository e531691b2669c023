from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import root

from lmsm.data import TrajectoryDataset, TreatmentSupport
from lmsm.errors import ContractError, SchemaError, SolverError
from lmsm.msm import (FeatureMap, FixedReference, MarginalReference, WorkingModel, build_lattice,
                      canonical_loss, lattice_from_v, link_deriv, link_eval, newton, solve_beta, u2,
                      u2_jacobian)

LINKS = ("logistic", "identity", "log")


def const_model(link="logistic", tau=1):
    return WorkingModel(link, FeatureMap(("intercept",), tau))


def binary_lattice(tau=1, lam=(0.5, 0.5)):
    sup = TreatmentSupport.uniform(tau, [0, 1])
    return sup, lattice_from_v(sup, FixedReference(sup, [lam] * tau), np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# links and losses


def test_link_values():
    assert link_eval("logistic", 0.0) == pytest.approx(0.5)
    assert link_eval("logistic", math.log(3)) == pytest.approx(0.75)
    assert link_eval("identity", -0.21) == -0.21
    assert link_deriv("logistic", 0.0) == pytest.approx(0.25)
    assert link_deriv("identity", 12.3) == 1.0


@pytest.mark.parametrize("link", LINKS)
def test_link_derivative_matches_central_difference(link):
    for x in (-2.0, 0.0, 0.7, 3.1):
        h = 1e-5
        fd = (link_eval(link, x + h) - link_eval(link, x - h)) / (2 * h)
        assert abs(fd - link_deriv(link, x)) < 1e-6


def test_link_saturates_without_overflow():
    with np.errstate(over="raise"):
        assert link_eval("logistic", 1e6) == pytest.approx(1.0)
        assert np.isfinite(link_eval("log", 1e6))


@pytest.mark.parametrize("link", LINKS)
@settings(max_examples=50, deadline=None)
@given(theta=st.floats(0.05, 0.95), x=st.floats(-3, 3))
def test_canonical_loss_gradient_identity(link, theta, x):
    # d/dx L(theta, m(x)) = m(x) - theta, so the gradient in gamma is (m - theta) phi
    h = 1e-5
    fd = (canonical_loss(link, theta, link_eval(link, x + h)) - canonical_loss(link, theta, link_eval(link, x - h))) / (2 * h)
    assert abs(fd - (link_eval(link, x) - theta)) < 1e-6


def test_unknown_link_rejected():
    with pytest.raises(ContractError):
        WorkingModel("probit", FeatureMap(("intercept",), 1))


# ---------------------------------------------------------------------------
# feature maps


def test_feature_map_terms():
    fm = FeatureMap(("intercept", "sum_treatment", "mean_treatment", "per_time_treatment",
                     "baseline:L1", "sum_treatment*baseline:L1"), 3, ("L1",))
    abar = np.array([[1, 2, 3], [0, 0, 4]])
    v = np.array([[2.0], [5.0]])
    phi = fm(abar, v)
    assert fm.d == 8
    np.testing.assert_allclose(phi[0], [1, 6, 2, 1, 2, 3, 2, 12])
    np.testing.assert_allclose(phi[1], [1, 4, 4 / 3, 0, 0, 4, 5, 20])


def test_single_time_terms():
    fm = FeatureMap(("treatment_1", "treatment_3", "treatment_1*treatment_3"), 3)
    np.testing.assert_allclose(fm(np.array([[2, 5, 3]])), [[2, 3, 6]])


def test_feature_map_rejects_bad_terms():
    with pytest.raises(SchemaError):
        FeatureMap(("intercept", "exec(1)"), 2)
    with pytest.raises(SchemaError):
        FeatureMap(("treatment_3",), 2)
    with pytest.raises(SchemaError):
        FeatureMap(("per_time_treatment*intercept",), 2)
    with pytest.raises(SchemaError):
        FeatureMap(("baseline:L9",), 2, ("L1",))


# ---------------------------------------------------------------------------
# U_2 and its Jacobian


def test_u2_trivial_cases():
    _, lat = binary_lattice()
    assert u2(const_model(), lat, [0.0])[0] == pytest.approx(-0.5)
    assert u2(const_model("identity"), lat, [0.3])[0] == pytest.approx(-0.3)
    assert u2_jacobian(const_model(), lat, [0.0])[0, 0] == pytest.approx(-0.25)


def test_u2_hand_enumeration_two_paths():
    sup, lat = binary_lattice()
    model = WorkingModel("logistic", FeatureMap(("intercept", "sum_treatment"), 1))
    g = np.array([0.2, -0.7])
    m0, m1 = 1 / (1 + np.exp(-0.2)), 1 / (1 + np.exp(-(0.2 - 0.7)))
    hand = -np.array([0.5 * m0 + 0.5 * m1, 0.5 * m1])
    np.testing.assert_allclose(u2(model, lat, g), hand, atol=1e-14)


def test_u2_dimension_mismatch():
    _, lat = binary_lattice()
    with pytest.raises(ContractError):
        u2(const_model(), lat, [0.0, 1.0])


def test_identity_jacobian_constant():
    _, lat = binary_lattice(2)
    model = WorkingModel("identity", FeatureMap(("intercept", "sum_treatment"), 2))
    np.testing.assert_allclose(u2_jacobian(model, lat, [0, 0]), u2_jacobian(model, lat, [3, -2]))


def _random_instance(seed, link, terms=("intercept", "sum_treatment", "baseline:L1", "per_time_treatment")):
    rng = np.random.default_rng(seed)
    sup = TreatmentSupport.uniform(3, [0, 1, 2])
    lam = FixedReference(sup, [rng.dirichlet(np.ones(3)) for _ in range(3)])
    ds = TrajectoryDataset.from_arrays([rng.integers(0, 3, (30, 1)), rng.normal(size=(30, 1)),
                                        rng.normal(size=(30, 1))],
                                       rng.integers(0, 3, (30, 3)), rng.random(30), support=sup)
    model = WorkingModel(link, FeatureMap(terms, 3, ("L1",)))
    return model, build_lattice(sup, lam, ds), rng.normal(scale=0.3, size=model.d)


@pytest.mark.parametrize("link", LINKS)
@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(link, seed):
    model, lat, g = _random_instance(seed, link)
    J = u2_jacobian(model, lat, g)
    h = 1e-6
    fd = np.column_stack([(u2(model, lat, g + h * e) - u2(model, lat, g - h * e)) / (2 * h)
                          for e in np.eye(model.d)])
    assert np.max(np.abs(J - fd)) < 1e-5
    np.testing.assert_allclose(J, J.T, atol=1e-12)
    assert np.max(np.linalg.eigvalsh(J)) <= 1e-12


# ---------------------------------------------------------------------------
# lattices


def test_lattice_sizes():
    sup = TreatmentSupport.uniform(4, range(5))
    lat = lattice_from_v(sup, FixedReference(sup, [np.full(5, 0.2)] * 4), np.zeros((1, 1)))
    assert lat.n_paths == 625
    assert len({tuple(p) for p in lat.paths[0]}) == 625
    sup1, lat1 = binary_lattice(1, (0.3, 0.7))
    np.testing.assert_allclose(lat1.weights[0], [0.3, 0.7])


def test_mc_lattice_weights_and_agreement():
    sup = TreatmentSupport.uniform(3, [0, 1, 2])
    lam = FixedReference(sup, [[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]])
    v = np.array([[0.0], [1.0]])
    exact = lattice_from_v(sup, lam, v)
    mc = lattice_from_v(sup, lam, v, mode="mc", mc_draws=20000, seed=3)
    np.testing.assert_allclose(mc.weights.sum(axis=1), 1.0, atol=1e-12)
    model = WorkingModel("logistic", FeatureMap(("intercept", "sum_treatment"), 3))
    g = np.array([-0.4, 0.3])
    # MC standard error of the sum_treatment component
    phi = mc.phi(model)
    vals = link_eval("logistic", phi @ g)[..., None] * phi
    se = vals.reshape(-1, 2).std(axis=0) / np.sqrt(vals.shape[0] * vals.shape[1])
    assert np.all(np.abs(u2(model, exact, g) - u2(model, mc, g)) < 3 * se + 1e-12)


def test_exact_cap_instructs_mc():
    sup = TreatmentSupport.uniform(9, range(5))
    with pytest.raises(ContractError, match="mc"):
        lattice_from_v(sup, FixedReference(sup, [np.full(5, 0.2)] * 9), np.zeros((1, 1)))


def test_marginal_reference_rows_sum_to_one(ref_cfg):
    ds = ref_cfg.draw(500, 1)
    lam = MarginalReference.fit(ds)
    for t in range(1, 5):
        P = lam.pmf(t, ds.treatments[:, : t - 1], ds.baseline)
        assert np.max(np.abs(P.sum(axis=1) - 1)) < 1e-12


# ---------------------------------------------------------------------------
# Newton solver


def test_solve_beta_closed_forms():
    _, lat = binary_lattice()
    assert abs(solve_beta(const_model(), lat, [0.5]).beta[0]) < 1e-10
    assert solve_beta(const_model(), lat, [0.75]).beta[0] == pytest.approx(math.log(3), abs=1e-9)


def test_solve_beta_against_independent_root_finder():
    # three paths with hand-coded features; the oracle integrates by explicit loops
    sup = TreatmentSupport(((0, 1, 2),))
    lam = FixedReference(sup, [[0.2, 0.5, 0.3]])
    lat = lattice_from_v(sup, lam, np.zeros((1, 1)))
    model = WorkingModel("logistic", FeatureMap(("intercept", "sum_treatment"), 1))
    u1 = np.array([0.45, 0.5])

    def F(g):
        out = np.array(u1, dtype=float)
        for a, p in zip((0, 1, 2), (0.2, 0.5, 0.3)):
            mu = 1 / (1 + math.exp(-(g[0] + g[1] * a)))
            out -= p * mu * np.array([1.0, a])
        return out

    ref = root(F, np.zeros(2), tol=1e-14).x
    got = solve_beta(model, lat, u1)
    np.testing.assert_allclose(got.beta, ref, atol=1e-6)
    assert got.residual <= 1e-8


def test_solve_beta_init_invariance():
    model, lat, _ = _random_instance(7, "logistic", ("intercept", "baseline:L1", "per_time_treatment"))
    u1 = -u2(model, lat, np.linspace(-0.2, 0.2, model.d))
    b1 = solve_beta(model, lat, u1, np.zeros(model.d)).beta
    b2 = solve_beta(model, lat, u1, np.full(model.d, 0.3)).beta
    assert np.max(np.abs(b1 - b2)) < 10 * 1e-8


def test_singular_jacobian_reports_condition():
    _, lat = binary_lattice()
    model = WorkingModel("logistic", FeatureMap(("intercept", "intercept"), 1))
    with pytest.raises(SolverError) as exc:
        solve_beta(model, lat, [0.5, 0.4])
    assert exc.value.condition is not None


def test_nonconvergence_carries_residual():
    with pytest.raises(SolverError) as exc:
        newton(lambda b: np.array([np.cos(b[0]) + 2.0]), lambda b: np.array([[-np.sin(b[0]) + 1e-3]]),
               np.array([0.1]), max_iter=5)
    assert exc.value.residual is not None and exc.value.residual > 0
