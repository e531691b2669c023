"""IPW, g-computation, TMLE-like and sequentially doubly robust estimators of beta."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from lmsm.crossfit import FoldAssignment, make_folds
from lmsm.data import TrajectoryDataset
from lmsm.errors import ContractError, SolverError
from lmsm.inference import eif_matrix, wald
from lmsm.msm import (ConditionalReference, MarginalReference, ReferenceMeasure, SequenceLattice,
                      WorkingModel, build_lattice, newton, solve_beta, u2, u2_jacobian)
from lmsm.nuisance import DEFAULT_TRUNCATION, RatioSet, fit_ratios, sequential_fit

ESTIMATORS = ("sdr", "tmle", "ipw", "gcomp")


@dataclass
class EstimateReport:
    """Point estimate, covariance, Wald interval and solver diagnostics."""

    estimator: str
    beta: np.ndarray
    sigma: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    u1_hat: np.ndarray | None = None
    n: int = 0
    iterations: int = 0
    residual: float = float("nan")
    truncated: list | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray | None:
        if self.sigma is None:
            return None
        return np.sqrt(np.clip(np.diag(self.sigma), 0.0, None) / self.n)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key, val in list(out.items()):
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
        out["se"] = None if self.se is None else self.se.tolist()
        return out

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def resolve_reference(lam, ds: TrajectoryDataset) -> ReferenceMeasure:
    """Accept a :class:`ReferenceMeasure` or one of the fitted kinds by name."""
    if isinstance(lam, ReferenceMeasure):
        return lam
    if lam in (None, "fitted-marginal"):
        return MarginalReference.fit(ds)
    if lam == "fitted-conditional":
        return ConditionalReference.fit(ds)
    raise ContractError(f"unknown reference measure {lam!r}")


def resolve_folds(folds, n: int, seed: int) -> FoldAssignment | None:
    if folds is None or isinstance(folds, FoldAssignment):
        return folds
    return make_folds(n, int(folds), seed)


# ---------------------------------------------------------------------------
# IPW


def _ipw_solve(ds, model, w, beta_init=None, tol=1e-8, max_iter=100):
    phi = model.phi(ds.treatments, ds.baseline)
    Y = ds.outcome
    n = ds.n

    def F(b):
        return ((w * (Y - model.mean(phi @ b))) @ phi) / n

    def J(b):
        return -((phi * (w * model.mean_deriv(phi @ b))[:, None]).T @ phi) / n

    init = np.zeros(model.d) if beta_init is None else np.asarray(beta_init, dtype=float)
    return newton(F, J, init, tol=tol, max_iter=max_iter)


def ipw_sandwich(ds: TrajectoryDataset, model: WorkingModel, beta, w) -> np.ndarray:
    """Sandwich covariance of the weighted estimating equation, treating ``w`` as known."""
    phi = model.phi(ds.treatments, ds.baseline)
    x = phi @ np.asarray(beta, dtype=float)
    psi = (w * (ds.outcome - model.mean(x)))[:, None] * phi
    bread = -((phi * (w * model.mean_deriv(x))[:, None]).T @ phi) / ds.n
    meat = psi.T @ psi / ds.n
    inv = np.linalg.inv(bread)
    return inv @ meat @ inv.T


def ipw_fit(ds: TrajectoryDataset, lam, model: WorkingModel, g_specs=None,
            c: float = DEFAULT_TRUNCATION, folds=None, ratios: RatioSet | None = None,
            tol: float = 1e-8, max_iter: int = 100, bootstrap: int = 0, seed: int = 0,
            level: float = 0.95) -> EstimateReport:
    """Solve ``n^-1 sum_i w_i (Y_i - m(beta . phi_i)) phi_i = 0`` with ``w_i = prod_t r_t``.

    Standard errors come only from a nonparametric bootstrap (``bootstrap``
    resamples, refitting the treatment models each time).
    """
    lam = resolve_reference(lam, ds)
    if ratios is None:
        if g_specs is None:
            raise ContractError("ipw_fit needs g_specs or precomputed ratios")
        ratios = fit_ratios(ds, lam, g_specs, resolve_folds(folds, ds.n, seed), c, seed)
    w = ratios.weights()
    if not np.any(w > 0):
        raise ContractError("all IPW weights are zero")
    res = _ipw_solve(ds, model, w, tol=tol, max_iter=max_iter)
    report = EstimateReport("ipw", res.beta, n=ds.n, iterations=res.iterations, residual=res.residual,
                            truncated=ratios.truncated.tolist(),
                            diagnostics={"max_weight": float(w.max()), "mean_weight": float(w.mean()),
                                         "lambda": lam.provenance})
    if bootstrap > 0:
        if g_specs is None:
            raise ContractError("bootstrap needs g_specs to refit the treatment models")
        rng = np.random.default_rng(seed)
        draws = []
        for _ in range(int(bootstrap)):
            idx = rng.integers(0, ds.n, ds.n)
            bs = ds.subset(idx)
            try:
                r = fit_ratios(bs, lam, g_specs, None, c, int(rng.integers(2**31)))
                draws.append(_ipw_solve(bs, model, r.weights(), res.beta, tol, max_iter).beta)
            except (SolverError, ContractError):
                continue
        draws = np.array(draws)
        sigma = np.atleast_2d(np.cov(draws, rowvar=False)) * ds.n
        se = np.sqrt(np.diag(sigma) / ds.n)
        from lmsm.inference import normal_quantile
        z = normal_quantile(level)
        report.sigma = sigma
        report.ci_low, report.ci_high = res.beta - z * se, res.beta + z * se
        report.diagnostics["bootstrap_draws"] = len(draws)
    return report


# ---------------------------------------------------------------------------
# U_1-based estimators


def _solve_and_report(tag, ds, model, lattice, u1_hat, beta_init, tol, max_iter):
    try:
        res = solve_beta(model, lattice, u1_hat, beta_init, tol=tol, max_iter=max_iter)
    except SolverError:
        if beta_init is None or np.allclose(beta_init, 0.0):
            raise
        res = solve_beta(model, lattice, u1_hat, None, tol=tol, max_iter=max_iter)
    return EstimateReport(tag, res.beta, u1_hat=np.asarray(u1_hat), n=ds.n,
                          iterations=res.iterations, residual=res.residual)


def _attach_inference(report, model, lattice, D1, centre, level):
    jac = u2_jacobian(model, lattice, report.beta)
    S = eif_matrix(D1, centre, jac)
    sigma, lo, hi = wald(S, report.beta, level)
    report.sigma, report.ci_low, report.ci_high = sigma, lo, hi
    report.diagnostics["eif_column_means"] = np.abs(S.mean(axis=0)).tolist()
    return S


def _ipw_init(ds, model, ratios, tol, max_iter):
    try:
        return _ipw_solve(ds, model, ratios.weights(), tol=tol, max_iter=max_iter).beta
    except (SolverError, ContractError):
        return None


def gcomp_fit(ds: TrajectoryDataset, lam, model: WorkingModel, outcome_specs, folds=None,
              lattice: SequenceLattice | None = None, beta_init=None, tol: float = 1e-8,
              max_iter: int = 100, seed: int = 0) -> EstimateReport:
    """Sequential-regression g-computation: ``U_1 = mean Tbar_1(H_1)``, then Newton.

    No covariance is reported.
    """
    lam = resolve_reference(lam, ds)
    lattice = lattice or build_lattice(ds.support, lam, ds)
    nuis = sequential_fit(ds, lam, model, None, outcome_specs, mode="plain",
                          folds=resolve_folds(folds, ds.n, seed), seed=seed)
    u1_hat = nuis.t_bar[1].mean(axis=0)
    report = _solve_and_report("gcomp", ds, model, lattice, u1_hat, beta_init, tol, max_iter)
    report.diagnostics["lambda"] = lam.provenance
    report.diagnostics["learners"] = _learner_summary(nuis.learners)
    return report


def tmle_fit(ds: TrajectoryDataset, lam, model: WorkingModel, g_specs, outcome_specs, folds=5,
             c: float = DEFAULT_TRUNCATION, ratios: RatioSet | None = None,
             lattice: SequenceLattice | None = None, beta_init=None, tol: float = 1e-8,
             max_iter: int = 100, seed: int = 0, level: float = 0.95) -> EstimateReport:
    """TMLE-like estimator: plain sequential regressions plus an additive
    ``prod r``-weighted fluctuation at every time point."""
    lam = resolve_reference(lam, ds)
    folds = resolve_folds(folds, ds.n, seed)
    lattice = lattice or build_lattice(ds.support, lam, ds)
    if ratios is None:
        ratios = fit_ratios(ds, lam, g_specs, folds, c, seed)
    nuis = sequential_fit(ds, lam, model, ratios, outcome_specs, mode="tmle", folds=folds, seed=seed)
    u1_hat = (nuis.t_bar[1] + nuis.epsilon[1]).mean(axis=0)
    if beta_init is None:
        beta_init = _ipw_init(ds, model, ratios, tol, max_iter)
    report = _solve_and_report("tmle", ds, model, lattice, u1_hat, beta_init, tol, max_iter)
    D1 = nuis.pseudo(1, fluctuated=True)
    _attach_inference(report, model, lattice, D1, D1.mean(axis=0), level)
    report.truncated = ratios.truncated.tolist()
    report.diagnostics.update({
        "lambda": lam.provenance,
        "epsilon": {t: np.asarray(e).tolist() for t, e in nuis.epsilon.items()},
        "learners": _learner_summary(nuis.learners),
    })
    return report


def sdr_fit(ds: TrajectoryDataset, lam, model: WorkingModel, g_specs, outcome_specs, folds=5,
            c: float = DEFAULT_TRUNCATION, ratios: RatioSet | None = None,
            lattice: SequenceLattice | None = None, beta_init=None, tol: float = 1e-8,
            max_iter: int = 100, seed: int = 0, level: float = 0.95,
            return_nuisance: bool = False):
    """Sequentially doubly robust estimator with cross-fitted nuisances.

    ``U_1`` is the mean of the pseudo-outcome ``D_1``; Newton starts from the
    IPW solution computed with the same cross-fitted ratios.  ``folds=None``
    disables cross-fitting (every learner sees every row).
    """
    lam = resolve_reference(lam, ds)
    folds = resolve_folds(folds, ds.n, seed)
    lattice = lattice or build_lattice(ds.support, lam, ds)
    if ratios is None:
        ratios = fit_ratios(ds, lam, g_specs, folds, c, seed)
    nuis = sequential_fit(ds, lam, model, ratios, outcome_specs, mode="sdr", folds=folds, seed=seed)
    D1 = nuis.pseudo(1)
    u1_hat = D1.mean(axis=0)
    if beta_init is None:
        beta_init = _ipw_init(ds, model, ratios, tol, max_iter)
    report = _solve_and_report("sdr", ds, model, lattice, u1_hat, beta_init, tol, max_iter)
    _attach_inference(report, model, lattice, D1, u1_hat, level)
    report.truncated = ratios.truncated.tolist()
    report.diagnostics.update({
        "lambda": lam.provenance,
        "folds": None if folds is None else folds.J,
        "learners": _learner_summary(nuis.learners),
    })
    if return_nuisance:
        return report, nuis
    return report


def _learner_summary(learners: dict) -> dict:
    out: dict[str, list] = {}
    for (t, _j), infos in learners.items():
        for info in infos:
            if info.get("kind") == "stack":
                out.setdefault(str(t), []).append(info["selected"])
    return out


def estimating_equation_residual(model, lattice, report: EstimateReport) -> float:
    """``max |U_2(beta) + U_1|`` for a U_1-based report."""
    return float(np.max(np.abs(u2(model, lattice, report.beta) + report.u1_hat)))
