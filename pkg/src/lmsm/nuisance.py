"""Treatment pmfs, density ratios and the backward sequential regressions.

Everything is held as per-unit arrays evaluated at the observed data:

* ``ratios[:, t-1]``   -- ``r_t(A_t, H_t)``, truncated at ``c``
* ``t_obs[t]``         -- ``T_t(A_t, H_t)``, shape ``(n, d)``
* ``t_bar[t]``         -- ``Tbar_t(H_t)``, with ``t_bar[tau+1] = Y * phi(Abar, V)``

The pseudo-outcome ``D_t`` obeys the recursion
``D_t = Tbar_t + r_t * (D_{t+1} - T_t)``, which unrolls to the explicit
sum implemented by :func:`pseudo_outcome`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from lmsm.crossfit import FoldAssignment, training_rows
from lmsm.data import TrajectoryDataset, history_matrix
from lmsm.errors import ContractError, LmsmError
from lmsm.learners import PMF_FLOOR, LearnerSpec, fit_pmf, fit_regression, learner_info
from lmsm.msm import ReferenceMeasure, WorkingModel

log = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 50.0


def _seed(*parts) -> int:
    # negative parts (the unfolded sentinel -1) wrap to distinct non-negative words
    return int(np.random.SeedSequence([int(p) % 2**32 for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# designs


def pmf_design(ds: TrajectoryDataset, t: int, rows=None) -> np.ndarray:
    """Features for ``g_t``: the history ``H_t``."""
    return history_matrix(ds, t, rows)


def outcome_design(ds: TrajectoryDataset, t: int, rows=None, a_codes=None) -> np.ndarray:
    """Features for ``T_t``: one-hot ``A_t`` followed by ``H_t``.

    ``a_codes`` substitutes a (counterfactual) treatment for the observed one.
    """
    H = history_matrix(ds, t, rows)
    if a_codes is None:
        sel = slice(None) if rows is None else np.asarray(rows)
        a_codes = ds.treatments[sel, t - 1]
    a_codes = np.broadcast_to(np.asarray(a_codes), (H.shape[0],))
    onehot = np.eye(ds.support.size(t))[ds.support.index(t, a_codes)]
    return np.hstack([onehot, H])


def lambda_matrix(lam: ReferenceMeasure, ds: TrajectoryDataset, t: int, rows=None) -> np.ndarray:
    """``lambda_t(. | Abar_{t-1}, V)`` at the observed past, ``(m, K_t)``."""
    sel = slice(None) if rows is None else np.asarray(rows)
    return np.asarray(lam.pmf(t, ds.treatments[sel, : t - 1], ds.baseline[sel]), dtype=float)


# ---------------------------------------------------------------------------
# injected (analytic) nuisances


class PmfOracle:
    """Known treatment mechanism; subclasses return ``g_t(. | H_t)`` rows."""

    def pmf(self, ds: TrajectoryDataset, t: int, rows=None) -> np.ndarray:
        raise NotImplementedError


class OutcomeOracle:
    """Known sequential regression; ``values`` returns ``T_t(a, H_t)`` rows, ``(m, d)``."""

    def values(self, ds: TrajectoryDataset, t: int, a_codes, rows=None) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# primitives


def density_ratio(lam_prob, g_prob, c: float = DEFAULT_TRUNCATION):
    """``min(lambda / g, c)`` with ``g`` read through the pmf floor."""
    g = np.maximum(np.asarray(g_prob, dtype=float), PMF_FLOOR)
    return np.minimum(np.asarray(lam_prob, dtype=float) / g, c)


def integrate_tbar(t_values, lam_pmf) -> np.ndarray:
    """``Tbar_t(h) = sum_a T_t(a, h) lambda_t(a | ...)`` for discrete support.

    ``t_values`` has shape ``(m, K)`` or ``(m, K, d)``; ``lam_pmf`` ``(m, K)``.
    """
    t_values = np.asarray(t_values, dtype=float)
    lam_pmf = np.asarray(lam_pmf, dtype=float)
    if t_values.ndim == 1:
        return float(t_values @ lam_pmf)
    if t_values.ndim == 2:
        return np.einsum("mk,mk->m", t_values, lam_pmf)
    return np.einsum("mkd,mk->md", t_values, lam_pmf)


def fluctuation(weights, residuals) -> np.ndarray:
    """TMLE shift: the ``weights``-weighted mean of ``residuals`` (rows are units)."""
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise ContractError("fluctuation weights sum to zero")
    return w @ np.asarray(residuals, dtype=float) / w.sum()


def pseudo_outcome(ratios, t_obs, t_bar, t: int) -> np.ndarray:
    """``D_t`` for one unit by the explicit sum.

    Parameters
    ----------
    ratios : array (tau,)
        ``r_s`` at the observed data, ``s = 1..tau``.
    t_obs : array (tau, d)
        ``T_s(a_s, h_s)``.
    t_bar : array (tau + 1, d)
        ``Tbar_s(h_s)`` for ``s = 1..tau+1``; the last row is ``y * phi``.
    t : int
        Time index, ``1 <= t <= tau + 1``.
    """
    ratios = np.asarray(ratios, dtype=float).reshape(-1)
    tau = ratios.shape[0]
    t_obs = np.asarray(t_obs, dtype=float).reshape(tau, -1)
    t_bar = np.asarray(t_bar, dtype=float).reshape(tau + 1, -1)
    if not 1 <= t <= tau + 1:
        raise ContractError(f"t must lie in 1..{tau + 1}")
    out = t_bar[t - 1].copy()
    prod = 1.0
    for s in range(t, tau + 1):
        prod *= ratios[s - 1]
        out += prod * (t_bar[s] - t_obs[s - 1])
    return out


# ---------------------------------------------------------------------------
# density ratios


@dataclass
class RatioSet:
    """Observed-data density ratios, optionally cross-fitted."""

    ratios: np.ndarray
    truncation: float
    truncated: np.ndarray
    g_obs: np.ndarray
    folds: FoldAssignment | None = None
    learners: dict = field(default_factory=dict)

    def cumulative(self, t: int) -> np.ndarray:
        """``prod_{s=t}^{tau} r_s`` per unit."""
        return np.prod(self.ratios[:, t - 1:], axis=1)

    def weights(self) -> np.ndarray:
        return np.prod(self.ratios, axis=1)


def fit_treatment_pmf(ds: TrajectoryDataset, t: int, spec: LearnerSpec, train_rows=None, seed: int = 0):
    """Fit ``g_t`` on ``H_t`` using the given rows."""
    rows = np.arange(ds.n) if train_rows is None else np.asarray(train_rows)
    if rows.size == 0:
        raise ContractError("no training rows")
    a = ds.support.index(t, ds.treatments[rows, t - 1])
    return fit_pmf(spec, pmf_design(ds, t, rows), a, n_classes=ds.support.size(t), seed=seed)


def fit_ratios(ds: TrajectoryDataset, lam: ReferenceMeasure, g_specs, folds: FoldAssignment | None = None,
               c: float = DEFAULT_TRUNCATION, seed: int = 0) -> RatioSet:
    """Estimate ``r_t = lambda_t / g_t`` at every observed ``(A_t, H_t)``.

    ``g_specs`` holds, per time point, a :class:`LearnerSpec` or a
    :class:`PmfOracle`.  With ``folds`` each row is predicted by learners
    trained on the other folds.
    """
    n, tau = ds.n, ds.tau
    if len(g_specs) != tau:
        raise ContractError(f"need {tau} treatment learner specs, got {len(g_specs)}")
    g_obs = np.zeros((n, tau))
    learners = {}
    blocks = [(None, np.arange(n), np.arange(n))] if folds is None else [
        (j, training_rows(folds, j), folds.validation_rows(j)) for j in range(folds.J)]
    for t in range(1, tau + 1):
        spec = g_specs[t - 1]
        a_idx = ds.support.index(t, ds.treatments[:, t - 1])
        for j, tr, va in blocks:
            if isinstance(spec, PmfOracle):
                P = spec.pmf(ds, t, va)
            else:
                try:
                    f = fit_treatment_pmf(ds, t, spec, tr, seed=_seed(seed, 1, t, -1 if j is None else j))
                except LmsmError as exc:
                    raise type(exc)(f"treatment model at t={t}: {exc}") from exc
                learners[(t, j)] = learner_info(f)
                P = f.predict_pmf(pmf_design(ds, t, va))
            g_obs[va, t - 1] = P[np.arange(len(va)), a_idx[va]]
    lam_obs = np.column_stack([
        lam.prob(t, ds.treatments[:, t - 1], ds.treatments[:, : t - 1], ds.baseline)
        for t in range(1, tau + 1)])
    raw = lam_obs / np.maximum(g_obs, PMF_FLOOR)
    ratios = density_ratio(lam_obs, g_obs, c)
    truncated = (raw > c).sum(axis=0)
    if truncated.any():
        log.info("density ratios truncated at c=%g: %s", c, truncated.tolist())
    return RatioSet(ratios, c, truncated, g_obs, folds, learners)


# ---------------------------------------------------------------------------
# sequential regressions


@dataclass
class NuisanceSet:
    """Fitted ``(r_t, T_t, Tbar_t)`` evaluated at the observed data."""

    ratios: np.ndarray
    t_obs: dict
    t_bar: dict
    mode: str
    folds: FoldAssignment | None = None
    epsilon: dict = field(default_factory=dict)
    prediction_fold: dict = field(default_factory=dict)
    train_sets: dict = field(default_factory=dict)
    learners: dict = field(default_factory=dict)

    @property
    def tau(self) -> int:
        return self.ratios.shape[1]

    def pseudo(self, t: int, fluctuated: bool = False) -> np.ndarray:
        """``D_t`` for all units, ``(n, d)``.

        With ``fluctuated`` the TMLE shifts ``epsilon_s`` are added to both
        ``T_s`` and ``Tbar_s``.
        """
        tau = self.tau
        if not 1 <= t <= tau + 1:
            raise ContractError(f"t must lie in 1..{tau + 1}")
        D = self.t_bar[tau + 1]
        for s in range(tau, t - 1, -1):
            eps = self.epsilon.get(s, 0.0) if fluctuated else 0.0
            D = (self.t_bar[s] + eps) + self.ratios[:, [s - 1]] * (D - (self.t_obs[s] + eps))
        return D

    def check_fold_hygiene(self) -> bool:
        """True when no row was predicted by a learner that saw it in training."""
        for t, pf in self.prediction_fold.items():
            for j, train in self.train_sets.get(t, {}).items():
                rows = np.flatnonzero(pf == j)
                if np.intersect1d(rows, train).size:
                    return False
        return True


def _fit_predict_t(ds, t, spec, target, tr, va, lam_va, seed):
    """Fit ``T_t`` componentwise on rows ``tr`` and evaluate on ``va`` at every level."""
    K = ds.support.size(t)
    levels = np.asarray(ds.support.levels[t - 1])
    m = len(va)
    d = target.shape[1]
    X_all = np.vstack([outcome_design(ds, t, va, a_codes=lv) for lv in levels])
    vals = np.zeros((K * m, d))
    infos = []
    if isinstance(spec, OutcomeOracle):
        for k, lv in enumerate(levels):
            vals[k * m:(k + 1) * m] = spec.values(ds, t, lv, va)
    else:
        X_tr = outcome_design(ds, t, tr)
        for comp in range(d):
            f = fit_regression(spec, X_tr, target[tr, comp], seed=_seed(seed, comp))
            vals[:, comp] = f.predict(X_all)
            infos.append(learner_info(f))
    vals = vals.reshape(K, m, d).transpose(1, 0, 2)
    a_idx = ds.support.index(t, ds.treatments[va, t - 1])
    t_obs = vals[np.arange(m), a_idx]
    t_bar = integrate_tbar(vals, lam_va)
    return t_obs, t_bar, infos


def sequential_fit(ds: TrajectoryDataset, lam: ReferenceMeasure, model: WorkingModel, ratios,
                   outcome_specs, mode: str = "sdr", folds: FoldAssignment | None = None,
                   seed: int = 0) -> NuisanceSet:
    """Backward loop ``t = tau, ..., 1`` fitting ``T_t`` and integrating ``Tbar_t``.

    ``mode`` selects the regression target at time ``t``:

    * ``"sdr"``  -- the pseudo-outcome ``D_{t+1}``
    * ``"plain"`` -- ``Tbar_{t+1}`` (sequential g-computation)
    * ``"tmle"`` -- the fluctuated ``Tbar*_{t+1}``; afterwards ``Tbar*_t = Tbar_t + eps_t``
      with ``eps_t`` the ``prod_{s>=t} r_s``-weighted mean residual.

    ``ratios`` is an ``(n, tau)`` array or a :class:`RatioSet`; it may be
    ``None`` in plain mode.
    """
    if mode not in ("sdr", "plain", "tmle"):
        raise ContractError(f"unknown mode {mode!r}")
    n, tau = ds.n, ds.tau
    if len(outcome_specs) != tau:
        raise ContractError(f"need {tau} outcome learner specs, got {len(outcome_specs)}")
    if isinstance(ratios, RatioSet):
        ratios = ratios.ratios
    if ratios is None:
        if mode != "plain":
            raise ContractError(f"mode {mode!r} needs density ratios")
        ratios = np.ones((n, tau))
    ratios = np.asarray(ratios, dtype=float)
    d = model.d
    phi_obs = model.phi(ds.treatments, ds.baseline)
    t_bar = {tau + 1: ds.outcome[:, None] * phi_obs}
    t_obs = {}
    nuis = NuisanceSet(ratios, t_obs, t_bar, mode, folds)
    blocks = [(-1, np.arange(n), np.arange(n))] if folds is None else [
        (j, training_rows(folds, j), folds.validation_rows(j)) for j in range(folds.J)]
    D_next = t_bar[tau + 1]
    star_next = t_bar[tau + 1]
    for t in range(tau, 0, -1):
        if mode == "sdr":
            target = D_next
        elif mode == "plain":
            target = t_bar[t + 1]
        else:
            target = star_next
        lam_all = lambda_matrix(lam, ds, t)
        t_obs[t] = np.zeros((n, d))
        t_bar[t] = np.zeros((n, d))
        nuis.prediction_fold[t] = np.full(n, -1)
        nuis.train_sets[t] = {}
        for j, tr, va in blocks:
            try:
                obs, bar, infos = _fit_predict_t(ds, t, outcome_specs[t - 1], target, tr, va,
                                                 lam_all[va], _seed(seed, 2, t, j))
            except LmsmError as exc:
                raise type(exc)(f"outcome model at t={t}: {exc}") from exc
            t_obs[t][va] = obs
            t_bar[t][va] = bar
            nuis.prediction_fold[t][va] = j
            nuis.train_sets[t][j] = tr
            if infos:
                nuis.learners[(t, j)] = infos
        if mode == "sdr":
            D_next = t_bar[t] + ratios[:, [t - 1]] * (D_next - t_obs[t])
        elif mode == "tmle":
            try:
                eps = fluctuation(np.prod(ratios[:, t - 1:], axis=1), target - t_obs[t])
            except ContractError as exc:
                raise ContractError(f"TMLE at t={t}: {exc}") from exc
            nuis.epsilon[t] = eps
            star_next = t_bar[t] + eps
    return nuis
