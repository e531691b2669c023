"""Monte Carlo harness: misspecification scenarios, replicate fits and metrics."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lmsm.crossfit import make_folds
from lmsm.errors import ContractError, LmsmError
from lmsm.estimators import gcomp_fit, ipw_fit, sdr_fit, tmle_fit
from lmsm.learners import LearnerSpec
from lmsm.msm import FeatureMap, ReferenceMeasure, WorkingModel, build_lattice
from lmsm.nuisance import DEFAULT_TRUNCATION, fit_ratios
from lmsm.sim.dgp import SequentialDgp

log = logging.getLogger(__name__)

MEAN = LearnerSpec("mean")

OUTCOME_STACK = LearnerSpec("stack", candidates=(
    LearnerSpec("mean"),
    LearnerSpec("linear_ridge", {"interactions": 3}),
    LearnerSpec("boosted_stumps", {"rounds": 60, "learning_rate": 0.15, "min_leaf": 10}),
), folds=3)

PMF_STACK = LearnerSpec("stack", candidates=(
    LearnerSpec("mean"),
    LearnerSpec("multinomial_softmax", {"lam": 1.0}),
    LearnerSpec("knn", {"k": 50}),
), folds=3)


@dataclass(frozen=True)
class ScenarioSpec:
    """Per-time choice of ``stack`` or ``mean`` for the outcome and treatment models."""

    name: str
    outcome: tuple[str, ...]
    pmf: tuple[str, ...]

    def __post_init__(self):
        if len(self.outcome) != len(self.pmf):
            raise ContractError("outcome and pmf choices must have one entry per time point")
        for c in self.outcome + self.pmf:
            if c not in ("stack", "mean"):
                raise ContractError(f"scenario entries must be 'stack' or 'mean', got {c!r}")

    @property
    def tau(self) -> int:
        return len(self.outcome)

    def outcome_specs(self, stack: LearnerSpec = OUTCOME_STACK) -> list[LearnerSpec]:
        return [stack if c == "stack" else MEAN for c in self.outcome]

    def pmf_specs(self, stack: LearnerSpec = PMF_STACK) -> list[LearnerSpec]:
        return [stack if c == "stack" else MEAN for c in self.pmf]


_S, _M = "stack", "mean"
SCENARIOS = {
    1: ScenarioSpec("1", (_S, _S, _S, _S), (_S, _S, _S, _S)),
    2: ScenarioSpec("2", (_S, _S, _S, _S), (_M, _M, _M, _M)),
    3: ScenarioSpec("3", (_M, _M, _M, _M), (_S, _S, _S, _S)),
    4: ScenarioSpec("4", (_S, _S, _M, _M), (_M, _M, _S, _S)),
    5: ScenarioSpec("5", (_M, _M, _S, _S), (_S, _S, _M, _M)),
}


def default_model(tau: int = 4) -> WorkingModel:
    """Logistic MSM in the cumulative dose: ``phi = (1, sum_t a_t)``."""
    return WorkingModel("logistic", FeatureMap(("intercept", "sum_treatment"), tau, ("L1",)))


def replicate_seed(seed: int, n: int, s: int) -> int:
    """Deterministic per-replicate seed derived from ``(seed, n, s)``."""
    return int(np.random.SeedSequence([int(seed), int(n), int(s)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# metrics


def mc_metrics(estimates, beta_star: float, n: int, lows=None, highs=None) -> dict:
    """Bias, scaled bias, ``n * MSE`` and coverage over replicates, with MC standard errors.

    ``variance`` uses the ``1/S`` normalization so that
    ``n_mse == sqrt_n_bias**2 + n * variance`` holds exactly.
    """
    est = np.asarray(estimates, dtype=float)
    S = est.shape[0]
    if S == 0:
        return {"S": 0, "bias": np.nan, "sqrt_n_bias": np.nan, "n_mse": np.nan, "variance": np.nan,
                "coverage": np.nan, "bias_mcse": np.nan, "coverage_mcse": np.nan, "n_mse_mcse": np.nan}
    err = est - beta_star
    bias = np.sum(err) / S
    var = np.sum((est - np.sum(est) / S) ** 2) / S
    sq = n * err ** 2
    out = {
        "S": S,
        "bias": bias,
        "sqrt_n_bias": np.sqrt(n) * bias,
        "n_mse": np.sum(sq) / S,
        "variance": var,
        "bias_mcse": np.sqrt(var / S),
        "n_mse_mcse": np.std(sq) / np.sqrt(S),
        "coverage": np.nan,
        "coverage_mcse": np.nan,
    }
    if lows is not None and highs is not None:
        lo = np.asarray(lows, dtype=float)
        hi = np.asarray(highs, dtype=float)
        ok = np.isfinite(lo) & np.isfinite(hi)
        if ok.any():
            hit = (lo[ok] <= beta_star) & (beta_star <= hi[ok])
            cov = np.sum(hit) / ok.sum()
            out["coverage"] = cov
            out["coverage_mcse"] = np.sqrt(cov * (1 - cov) / ok.sum())
    return out


@dataclass
class McReport:
    """Metrics per (estimator, n) plus the raw per-replicate estimates."""

    scenario: str
    beta_star: float
    component: int
    cells: dict = field(default_factory=dict)      # (estimator, n) -> metrics dict
    replicates: dict = field(default_factory=dict)  # (estimator, n) -> {"beta", "low", "high", "seed"}
    failures: dict = field(default_factory=dict)    # (estimator, n) -> [messages]
    meta: dict = field(default_factory=dict)

    def metric(self, estimator: str, n: int, name: str) -> float:
        return float(self.cells[(estimator, n)][name])

    def rows(self) -> list[dict]:
        out = []
        for (est, n), m in sorted(self.cells.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            for k, v in m.items():
                out.append({"scenario": self.scenario, "estimator": est, "n": n, "metric": k, "value": v})
            out.append({"scenario": self.scenario, "estimator": est, "n": n, "metric": "failures",
                        "value": len(self.failures.get((est, n), []))})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.meta.get('config_hash', '')} version={self.meta.get('version', '')}\n")
            w = csv.DictWriter(fh, fieldnames=["scenario", "estimator", "n", "metric", "value"])
            w.writeheader()
            for r in self.rows():
                w.writerow({**r, "value": repr(float(r["value"]))})

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "beta_star": self.beta_star,
            "component": self.component,
            "meta": self.meta,
            "cells": [{"estimator": e, "n": n, **{k: float(v) for k, v in m.items()},
                       "failures": len(self.failures.get((e, n), []))}
                      for (e, n), m in sorted(self.cells.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
            "failure_messages": {f"{e}@{n}": msgs for (e, n), msgs in self.failures.items() if msgs},
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# one replicate


@dataclass
class ReplicateTask:
    dgp: SequentialDgp
    scenario: ScenarioSpec
    estimators: tuple[str, ...]
    n: int
    s: int
    seed: int
    model: WorkingModel
    lam: ReferenceMeasure
    folds: int = 5
    c: float = DEFAULT_TRUNCATION
    outcome_stack: LearnerSpec = OUTCOME_STACK
    pmf_stack: LearnerSpec = PMF_STACK


def run_replicate(task: ReplicateTask) -> dict:
    """Fit every requested estimator on one draw.

    SDR, TMLE and IPW share one set of cross-fitted density ratios; the
    U_1-based estimators share one lattice.  Returns, per estimator, either
    ``(beta, low, high)`` or an error message.
    """
    rs = replicate_seed(task.seed, task.n, task.s)
    ds = task.dgp.draw(task.n, rs)
    out: dict = {"seed": rs}
    try:
        fa = make_folds(ds.n, task.folds, rs)
        lattice = build_lattice(ds.support, task.lam, ds)
        g_specs = task.scenario.pmf_specs(task.pmf_stack)
        q_specs = task.scenario.outcome_specs(task.outcome_stack)
        ratios = fit_ratios(ds, task.lam, g_specs, fa, task.c, rs)
    except LmsmError as exc:
        return {**out, **{e: f"{type(exc).__name__}: {exc}" for e in task.estimators}}
    for est in task.estimators:
        try:
            if est == "sdr":
                rep = sdr_fit(ds, task.lam, task.model, g_specs, q_specs, fa, task.c, ratios, lattice, seed=rs)
            elif est == "tmle":
                rep = tmle_fit(ds, task.lam, task.model, g_specs, q_specs, fa, task.c, ratios, lattice, seed=rs)
            elif est == "ipw":
                rep = ipw_fit(ds, task.lam, task.model, ratios=ratios)
            elif est == "gcomp":
                rep = gcomp_fit(ds, task.lam, task.model, q_specs, fa, lattice, seed=rs)
            else:
                raise ContractError(f"unknown estimator {est!r}")
            lo = rep.ci_low if rep.ci_low is not None else np.full(task.model.d, np.nan)
            hi = rep.ci_high if rep.ci_high is not None else np.full(task.model.d, np.nan)
            out[est] = (np.asarray(rep.beta), np.asarray(lo), np.asarray(hi))
        except (LmsmError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[est] = f"{type(exc).__name__}: {exc}"
    return out


def run_scenario(dgp: SequentialDgp, scenario: ScenarioSpec, estimators=("sdr", "tmle", "ipw"),
                 n_grid=(250, 500, 1000, 2000), S: int = 200, seed: int = 0,
                 beta_star=None, model: WorkingModel | None = None, lam: ReferenceMeasure | None = None,
                 component: int = -1, threads: int = 1, folds: int = 5, c: float = DEFAULT_TRUNCATION,
                 outcome_stack: LearnerSpec = OUTCOME_STACK, pmf_stack: LearnerSpec = PMF_STACK,
                 progress=None) -> McReport:
    """``S`` replicates per sample size; metrics on ``beta[component]``.

    ``beta_star`` defaults to the exact enumeration truth.  Replicate seeds
    depend only on ``(seed, n, s)``, so results do not depend on ``threads``.
    """
    from lmsm.sim.oracle import analytic_nuisances, marginal_reference

    if scenario.tau != dgp.tau:
        raise ContractError("scenario length differs from the process's tau")
    model = model or default_model(dgp.tau)
    lam = lam or marginal_reference(dgp)
    if beta_star is None:
        beta_star = analytic_nuisances(dgp, model, lam).beta()
    b_star = float(np.asarray(beta_star).reshape(-1)[component])
    estimators = tuple(estimators)
    tasks = [ReplicateTask(dgp, scenario, estimators, int(n), s, seed, model, lam, folds, c,
                           outcome_stack, pmf_stack)
             for n in n_grid for s in range(S)]
    threads = max(1, int(threads or os.cpu_count() or 1))
    if threads == 1:
        results = []
        for i, t in enumerate(tasks):
            results.append(run_replicate(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(run_replicate, tasks, chunksize=1))
    report = McReport(scenario.name, b_star, component,
                      meta={"S": S, "n_grid": list(map(int, n_grid)), "seed": seed,
                            "config_hash": dgp.config_hash(), "estimators": list(estimators)})
    for n in n_grid:
        n = int(n)
        rows = [r for t, r in zip(tasks, results) if t.n == n]
        for est in estimators:
            ok = [r[est] for r in rows if not isinstance(r[est], str)]
            fails = [f"seed {r['seed']}: {r[est]}" for r in rows if isinstance(r[est], str)]
            b = np.array([o[0][component] for o in ok])
            lo = np.array([o[1][component] for o in ok])
            hi = np.array([o[2][component] for o in ok])
            report.cells[(est, n)] = mc_metrics(b, b_star, n, lo, hi)
            report.replicates[(est, n)] = {"beta": b, "low": lo, "high": hi}
            report.failures[(est, n)] = fails
    return report
