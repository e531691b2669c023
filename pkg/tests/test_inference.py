from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsm.errors import InferenceError
from lmsm.inference import Z_975, eif_matrix, normal_quantile, wald
from lmsm.msm import FeatureMap, WorkingModel, lattice_from_v, solve_beta, u2_jacobian
from lmsm.sim.dgp import ToyDgp
from lmsm.sim.oracle import marginal_reference


def test_hand_eif():
    S = eif_matrix([0.4, 0.6], 0.5, -0.25)
    np.testing.assert_allclose(S[:, 0], [-0.4, 0.4], atol=1e-15)


def test_constant_pseudo_gives_zero_rows():
    D = np.full((7, 2), 0.3)
    S = eif_matrix(D, D.mean(axis=0), np.array([[-1.0, 0.2], [0.2, -0.5]]))
    assert np.all(S == 0)
    sigma, lo, hi = wald(S, [1.0, 2.0])
    np.testing.assert_array_equal(lo, hi)


def test_column_means_vanish(rng):
    D = rng.normal(size=(1000, 3)) * [1, 10, 100]
    J = -np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]])
    S = eif_matrix(D, D.mean(axis=0), J)
    assert np.max(np.abs(S.mean(axis=0))) <= 1e-10


def test_singular_jacobian():
    with pytest.raises(InferenceError, match="condition"):
        eif_matrix(np.ones((3, 2)), [0, 0], np.ones((2, 2)))


def test_halfwidth_arithmetic():
    S = np.tile([2.0, -2.0], 200)[:, None]   # variance 4, n = 400
    sigma, lo, hi = wald(S, [0.0])
    assert sigma[0, 0] == pytest.approx(4.0)
    assert hi[0] == pytest.approx(Z_975 * 0.1, abs=1e-15)
    assert hi[0] == pytest.approx(0.196, abs=1e-4)
    assert lo[0] == pytest.approx(-hi[0])


def test_wald_needs_two_rows():
    with pytest.raises(InferenceError):
        wald(np.ones((1, 1)), [0.0])


def test_quantiles():
    assert normal_quantile(0.95) == Z_975 == 1.959963985
    assert normal_quantile(0.9) == pytest.approx(1.6448536269514722, abs=1e-8)
    assert normal_quantile(0.99) == pytest.approx(2.5758293035489004, abs=1e-8)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InferenceError):
            normal_quantile(bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(1, 4), st.integers(0, 10**6))
def test_sigma_symmetric_psd(n, d, seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(n, d))
    sigma, lo, hi = wald(S, np.zeros(d))
    np.testing.assert_array_equal(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma).min() >= -1e-12
    assert np.all(lo <= hi)


@dataclass(frozen=True)
class ScaledModel(WorkingModel):
    scale: float = 1.0

    def phi(self, abar, v=None):
        return self.scale * self.features(abar, v)


@pytest.mark.parametrize("k", [0.5, 3.0, 17.0])
def test_phi_scaling_leaves_z_invariant(k):
    """Identity link: scaling phi by k maps beta to beta/k and keeps Wald z fixed."""
    dgp = ToyDgp(tau=2)
    lam = marginal_reference(dgp)
    rng = np.random.default_rng(8)
    D = rng.normal(0.4, 0.2, size=(300, 2))

    def zstat(scale):
        model = ScaledModel("identity", FeatureMap(("intercept", "sum_treatment"), 2, ()), scale)
        lat = lattice_from_v(dgp.support, lam, np.zeros((1, 0)))
        Dk = D * scale
        u1 = Dk.mean(axis=0)
        res = solve_beta(model, lat, u1)
        S = eif_matrix(Dk, u1, u2_jacobian(model, lat, res.beta))
        sigma, _, _ = wald(S, res.beta)
        return res.beta, res.beta / np.sqrt(np.diag(sigma) / 300)

    b1, z1 = zstat(1.0)
    bk, zk = zstat(k)
    np.testing.assert_allclose(bk, b1 / k, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(zk, z1, rtol=1e-8, atol=1e-8)
