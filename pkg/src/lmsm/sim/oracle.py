"""Exact nuisances and true parameters by enumeration over the finite state space.

The chronological grid has axes ``(L_1, A_1, ..., L_tau, A_tau)``.  Backward
induction over that grid gives

* ``T_tau(a, h)  = P(Y=1 | h, a) * phi(abar, v)``
* ``Tbar_t(h)    = sum_a lambda_t(a | abar_{t-1}, v) T_t(a, h)``
* ``T_{t-1}(a, h) = sum_l P(L_t = l | h, a) Tbar_t(h, a, l)``

and ``U_1 = sum_{l_1} P(L_1 = l_1) Tbar_1(l_1)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from lmsm.data import TrajectoryDataset
from lmsm.errors import OracleError
from lmsm.estimators import _ipw_solve, ipw_sandwich
from lmsm.msm import FixedReference, ReferenceMeasure, WorkingModel, lattice_from_v, solve_beta
from lmsm.nuisance import NuisanceSet, OutcomeOracle, PmfOracle, fit_ratios
from lmsm.sim.dgp import SequentialDgp

GRID_CAP = 10**7


def _axes(dgp: SequentialDgp, upto: int, with_a: bool) -> list[tuple[int, ...]]:
    """Level tuples of the grid axes through ``L_upto`` (and ``A_upto`` if ``with_a``)."""
    axes = []
    for t in range(1, upto + 1):
        axes.append(dgp.l_levels[t - 1])
        if t < upto or with_a:
            axes.append(dgp.a_levels[t - 1])
    return axes


def _grid(dgp: SequentialDgp, upto: int, with_a: bool):
    """Flattened grid points as ``(L (N, upto), A (N, upto or upto-1), shape)``."""
    axes = _axes(dgp, upto, with_a)
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape, dtype=float)) > GRID_CAP:
        raise OracleError(f"state space of {int(np.prod(shape, dtype=float))} cells exceeds cap {GRID_CAP}")
    pts = np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, len(axes))
    return pts[:, 0::2], pts[:, 1::2], shape


def _level_index(levels, codes) -> np.ndarray:
    lv = np.asarray(levels)
    pos = np.searchsorted(lv, codes)
    pos = np.clip(pos, 0, len(lv) - 1)
    if not np.all(lv[pos] == codes):
        raise OracleError("value outside the process's support")
    return pos


def joint_prefix_pmf(dgp: SequentialDgp, upto: int, with_a: bool = True) -> np.ndarray:
    """Probability of every grid prefix through ``L_upto`` (``A_upto``), flattened in grid order."""
    L, A, _ = _grid(dgp, upto, with_a)
    p = np.ones(L.shape[0])
    for t in range(1, upto + 1):
        Pl = dgp.l_pmf(t, L[:, : t - 1], A[:, : t - 1])
        p *= Pl[np.arange(len(p)), _level_index(dgp.l_levels[t - 1], L[:, t - 1])]
        if t < upto or with_a:
            Pa = dgp.a_pmf(t, L[:, :t], A[:, : t - 1])
            p *= Pa[np.arange(len(p)), _level_index(dgp.a_levels[t - 1], A[:, t - 1])]
    return p


def marginal_treatment_pmfs(dgp: SequentialDgp) -> list[np.ndarray]:
    """Exact marginal law of each ``A_t``."""
    out = []
    for t in range(1, dgp.tau + 1):
        _, A, _ = _grid(dgp, t, True)
        p = joint_prefix_pmf(dgp, t, True)
        idx = _level_index(dgp.a_levels[t - 1], A[:, t - 1])
        out.append(np.bincount(idx, weights=p, minlength=len(dgp.a_levels[t - 1])))
    return out


def marginal_reference(dgp: SequentialDgp) -> FixedReference:
    """Reference measure equal to the product of the exact treatment marginals."""
    return FixedReference(dgp.support, [p.tolist() for p in marginal_treatment_pmfs(dgp)])


@dataclass
class AnalyticNuisances:
    """Exact ``g_t``, ``T_t``, ``Tbar_t``, ``U_1`` and ``beta`` for one (process, model, lambda)."""

    dgp: SequentialDgp
    lam: ReferenceMeasure
    model: WorkingModel
    t_tables: dict = field(default_factory=dict)
    tbar_tables: dict = field(default_factory=dict)
    u1: np.ndarray | None = None

    # -- evaluation at data -------------------------------------------------

    def _codes(self, ds: TrajectoryDataset, t: int, rows, a_codes=None, with_a=True):
        sel = slice(None) if rows is None else np.asarray(rows)
        cols = []
        for s in range(1, t + 1):
            cols.append(_level_index(self.dgp.l_levels[s - 1], ds.covariates[s - 1][sel, 0].astype(np.int64)))
            if s < t:
                cols.append(_level_index(self.dgp.a_levels[s - 1], ds.treatments[sel, s - 1]))
            elif with_a:
                a = ds.treatments[sel, t - 1] if a_codes is None else a_codes
                a = np.broadcast_to(np.asarray(a), cols[0].shape)
                cols.append(_level_index(self.dgp.a_levels[t - 1], a))
        return tuple(cols)

    def t_at(self, ds, t, a_codes=None, rows=None) -> np.ndarray:
        """``T_t(a, H_t)`` at the selected rows, ``(m, d)``."""
        return self.t_tables[t][self._codes(ds, t, rows, a_codes)]

    def tbar_at(self, ds, t, rows=None) -> np.ndarray:
        """``Tbar_t(H_t)``; ``t = tau + 1`` gives ``Y * phi``."""
        if t == self.dgp.tau + 1:
            sel = slice(None) if rows is None else np.asarray(rows)
            return ds.outcome[sel, None] * self.model.phi(ds.treatments[sel], ds.baseline[sel])
        return self.tbar_tables[t][self._codes(ds, t, rows, with_a=False)]

    def g_at(self, ds, t, rows=None) -> np.ndarray:
        """True ``g_t(. | H_t)`` rows."""
        sel = slice(None) if rows is None else np.asarray(rows)
        L = np.column_stack([ds.covariates[s][sel, 0] for s in range(t)]).astype(np.int64)
        return self.dgp.a_pmf(t, L, ds.treatments[sel, : t - 1])

    def pmf_oracle(self) -> PmfOracle:
        return _TruePmf(self)

    def outcome_oracle(self) -> OutcomeOracle:
        return _TrueOutcome(self)

    def true_ratios(self, ds: TrajectoryDataset, c: float = np.inf):
        """``lambda_t / g_t`` at the observed data with the true ``g``."""
        return fit_ratios(ds, self.lam, [self.pmf_oracle()] * self.dgp.tau, None, c)

    def nuisance_set(self, ds: TrajectoryDataset) -> NuisanceSet:
        """Every nuisance at its true value, evaluated at the observed data."""
        tau = self.dgp.tau
        ratios = self.true_ratios(ds).ratios
        t_obs = {t: self.t_at(ds, t) for t in range(1, tau + 1)}
        t_bar = {t: self.tbar_at(ds, t) for t in range(1, tau + 2)}
        return NuisanceSet(ratios, t_obs, t_bar, "sdr")

    # -- truth ---------------------------------------------------------------

    def beta(self, tol: float = 1e-12) -> np.ndarray:
        """The projection parameter solving ``U_2(beta) + U_1 = 0`` under the true ``V`` law."""
        return solve_beta(self.model, self.population_lattice(), self.u1, tol=tol, max_iter=200).beta

    def population_lattice(self):
        v_levels = np.asarray(self.dgp.l_levels[0], dtype=float)[:, None]
        L = np.zeros((len(v_levels), 0), dtype=np.int64)
        pv = self.dgp.l_pmf(1, L, L)[0]
        return lattice_from_v(self.dgp.support, self.lam, v_levels, pv)


class _TruePmf(PmfOracle):
    def __init__(self, an: AnalyticNuisances):
        self.an = an

    def pmf(self, ds, t, rows=None):
        return self.an.g_at(ds, t, rows)


class _TrueOutcome(OutcomeOracle):
    def __init__(self, an: AnalyticNuisances):
        self.an = an

    def values(self, ds, t, a_codes, rows=None):
        return self.an.t_at(ds, t, a_codes, rows)


def analytic_nuisances(dgp: SequentialDgp, model: WorkingModel, lam: ReferenceMeasure | None = None,
                       ) -> AnalyticNuisances:
    """Backward induction over the full grid.  ``lam`` defaults to the exact marginals."""
    lam = marginal_reference(dgp) if lam is None else lam
    tau = dgp.tau
    an = AnalyticNuisances(dgp, lam, model)
    L, A, shape = _grid(dgp, tau, True)
    v = L[:, :1].astype(float)
    T = dgp.y_mean(L, A)[:, None] * model.phi(A, v)
    d = T.shape[1]
    for t in range(tau, 0, -1):
        an.t_tables[t] = T.reshape(shape + (d,))
        # integrate over A_t under lambda
        Lg, Ag, shp = _grid(dgp, t, False)
        lam_p = np.asarray(lam.pmf(t, Ag, Lg[:, :1].astype(float)), dtype=float)
        K = lam_p.shape[1]
        Tbar = np.einsum("mkd,mk->md", T.reshape(-1, K, d), lam_p)
        an.tbar_tables[t] = Tbar.reshape(shp + (d,))
        if t == 1:
            pl = dgp.l_pmf(1, Lg[:, :0], Ag)[0]
            an.u1 = pl @ Tbar
            break
        # integrate over L_t under the covariate law
        Lp, Ap, shp_prev = _grid(dgp, t - 1, True)
        nl = len(dgp.l_levels[t - 1])
        pl = dgp.l_pmf(t, Lp, Ap)
        T = np.einsum("mld,ml->md", Tbar.reshape(-1, nl, d), pl)
        shape = shp_prev
    return an


# ---------------------------------------------------------------------------
# large-sample IPW truth oracle


@dataclass
class TruthRecord:
    beta: np.ndarray
    se: np.ndarray
    n_oracle: int
    seed: int
    config_hash: str

    def to_dict(self):
        return {"beta": self.beta.tolist(), "se": self.se.tolist(), "n_oracle": self.n_oracle,
                "seed": self.seed, "config_hash": self.config_hash}


def true_beta_oracle(dgp: SequentialDgp, model: WorkingModel, lam: ReferenceMeasure | None = None,
                     n_oracle: int = 10**6, seed: int = 0, an: AnalyticNuisances | None = None) -> TruthRecord:
    """IPW with the analytic, untruncated weights on one large draw.

    Returns the estimate and its sandwich standard error (weights treated as known).
    """
    an = an or analytic_nuisances(dgp, model, lam)
    ds = dgp.draw(n_oracle, seed)
    w = an.true_ratios(ds).weights()
    beta = _ipw_solve(ds, model, w, tol=1e-10, max_iter=200).beta
    se = np.sqrt(np.diag(ipw_sandwich(ds, model, beta, w)) / ds.n)
    return TruthRecord(beta, se, n_oracle, seed, truth_key(dgp, model))


def truth_key(dgp: SequentialDgp, model: WorkingModel) -> str:
    return f"{dgp.config_hash()}:{model.link}:{'+'.join(model.features.terms)}"


TRUTH_FILE = "truth.json"


def _fixture_path() -> Path:
    return Path(str(resources.files("lmsm") / "fixtures" / TRUTH_FILE))


def load_truth(dgp: SequentialDgp, model: WorkingModel, path=None) -> TruthRecord:
    """Pinned oracle record for ``(dgp, model)``."""
    path = Path(path) if path else _fixture_path()
    key = truth_key(dgp, model)
    table = json.loads(path.read_text()) if path.exists() else {}
    if key not in table:
        raise OracleError(f"no pinned truth for {key}; run the truth command first")
    r = table[key]
    return TruthRecord(np.asarray(r["beta"]), np.asarray(r["se"]), r["n_oracle"], r["seed"], key)


def pin_truth(record: TruthRecord, path=None) -> Path:
    path = Path(path) if path else _fixture_path()
    table = json.loads(path.read_text()) if path.exists() else {}
    table[record.config_hash] = record.to_dict()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return path
