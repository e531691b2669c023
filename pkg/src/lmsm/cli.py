"""Command-line front end.

Usage::

    lmsm fit --config fit.yaml [--out DIR] [--seed N] [--threads N]
    lmsm simulate --config sim.yaml
    lmsm benchmark --config bench.yaml
    lmsm truth --config truth.yaml

Exit codes: 0 success, 1 user error (a JSON error report is written to
stderr and, when possible, to ``<out>/error.json``), 2 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from lmsm import __version__
from lmsm.data import Schema, load_csv, write_csv
from lmsm.errors import LmsmError, SchemaError
from lmsm.estimators import ESTIMATORS, _json_default, gcomp_fit, ipw_fit, resolve_reference, sdr_fit, tmle_fit
from lmsm.learners import LearnerSpec
from lmsm.msm import FeatureMap, FixedReference, WorkingModel

log = logging.getLogger("lmsm")

# allowed keys per section; nested dicts are checked recursively
_FIT_KEYS = {
    "data": {"path": None, "tau": None, "treatments": None, "covariates": None, "outcome": None,
             "baseline": None, "support": None},
    "model": {"link": None, "phi": None},
    "reference": None,
    "learners": {"outcome": None, "treatment": None},
    "estimators": None,
    "folds": None,
    "truncation": None,
    "seed": None,
    "bootstrap": None,
    "level": None,
}
_DGP_KEYS = {"kind": None, "l1_probs": None, "constants": None, "tau": None}
_SIM_KEYS = {"dgp": _DGP_KEYS, "n": None, "seed": None}
_BENCH_KEYS = {"dgp": _DGP_KEYS, "scenarios": None, "estimators": None, "n_grid": None, "S": None,
               "seed": None, "folds": None, "truncation": None, "truth": None}
_TRUTH_KEYS = {"dgp": _DGP_KEYS, "n_oracle": None, "seed": None, "pin": None, "fixture": None}
SCHEMAS = {"fit": _FIT_KEYS, "simulate": _SIM_KEYS, "benchmark": _BENCH_KEYS, "truth": _TRUTH_KEYS}


class UserError(LmsmError):
    """Invalid invocation or configuration."""


def check_keys(cfg, allowed, prefix: str = "") -> None:
    """Reject any key not declared in ``allowed``, naming its dotted path."""
    if not isinstance(cfg, dict):
        raise SchemaError(f"section {prefix.rstrip('.') or '<root>'} must be a mapping")
    for key, val in cfg.items():
        path = f"{prefix}{key}"
        if key not in allowed:
            raise SchemaError(f"unknown configuration key {path!r}")
        if isinstance(allowed[key], dict) and val is not None:
            check_keys(val, allowed[key], path + ".")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_config(path, command: str) -> dict:
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"config {path} is not valid YAML: {exc}") from exc
    check_keys(cfg, SCHEMAS[command])
    return cfg


# ---------------------------------------------------------------------------
# config -> objects


def parse_learner(obj, role: str) -> LearnerSpec:
    from lmsm.sim.harness import OUTCOME_STACK, PMF_STACK

    if isinstance(obj, LearnerSpec):
        return obj
    if isinstance(obj, str):
        if obj == "stack":
            return OUTCOME_STACK if role == "outcome" else PMF_STACK
        return LearnerSpec(obj)
    if isinstance(obj, dict):
        check_keys(obj, {"kind": None, "hyperparameters": None, "candidates": None, "folds": None},
                   f"learners.{role}.")
        if "kind" not in obj:
            raise SchemaError(f"learners.{role} entry needs a 'kind'")
        cands = tuple(parse_learner(c, role) for c in obj.get("candidates", ()) or ())
        return LearnerSpec(obj["kind"], dict(obj.get("hyperparameters") or {}), cands, int(obj.get("folds", 3)))
    raise SchemaError(f"cannot parse learner specification for {role}: {obj!r}")


def parse_learners(obj, role: str, tau: int) -> list[LearnerSpec]:
    if obj is None:
        obj = "stack"
    if isinstance(obj, list):
        if len(obj) != tau:
            raise SchemaError(f"learners.{role} lists {len(obj)} entries for tau={tau}")
        return [parse_learner(o, role) for o in obj]
    spec = parse_learner(obj, role)
    return [spec] * tau


def parse_model(cfg: dict, tau: int, baseline_names) -> WorkingModel:
    m = cfg.get("model") or {}
    phi = m.get("phi", "intercept+sum_treatment")
    terms = phi.split("+") if isinstance(phi, str) else list(phi)
    return WorkingModel(m.get("link", "logistic"), FeatureMap(tuple(terms), tau, tuple(baseline_names)))


def parse_schema(d: dict) -> Schema:
    if "path" not in d:
        raise SchemaError("data.path is required")
    if "tau" not in d:
        raise SchemaError("data.tau is required")
    tau = int(d["tau"])
    default = Schema.default(tau)
    covs = d.get("covariates")
    if covs is not None:
        covs = tuple(tuple([c] if isinstance(c, str) else c) for c in covs)
    support = d.get("support")
    if support is not None:
        support = tuple(tuple(int(a) for a in lv) for lv in support)
    return Schema(tau,
                  tuple(d.get("treatments") or default.treatments),
                  covs or default.covariates,
                  d.get("outcome") or default.outcome,
                  tuple(d["baseline"]) if d.get("baseline") is not None else None,
                  support)


def parse_reference(obj, ds):
    if obj is None or isinstance(obj, str):
        return resolve_reference(obj, ds)
    if isinstance(obj, dict):
        check_keys(obj, {"fixed": None}, "reference.")
        return FixedReference(ds.support, obj["fixed"])
    raise SchemaError(f"cannot parse reference measure {obj!r}")


def parse_dgp(d: dict | None):
    from lmsm.sim.dgp import DgpConfig, ToyDgp

    d = dict(d or {})
    kind = d.pop("kind", "reference")
    if kind == "toy":
        return ToyDgp(**({"tau": int(d["tau"])} if "tau" in d else {}))
    if kind != "reference":
        raise SchemaError(f"unknown dgp.kind {kind!r}")
    kw = {}
    if "l1_probs" in d:
        kw["l1_probs"] = tuple(float(x) for x in d["l1_probs"])
    if "constants" in d:
        kw["constants"] = tuple(tuple(tuple(float(x) for x in r) for r in lvl) for lvl in d["constants"])
    return DgpConfig(**kw)


# ---------------------------------------------------------------------------
# commands


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "version": __version__}


def _summary_table(rows) -> str:
    head = f"{'estimator':<10}{'term':>6}{'estimate':>12}{'se':>10}{'ci_low':>12}{'ci_high':>12}"
    lines = [head, "-" * len(head)]
    for est, k, b, se, lo, hi in rows:
        fmt = lambda x: f"{x:12.4f}" if x is not None and np.isfinite(x) else f"{'-':>12}"
        se_s = f"{se:10.4f}" if se is not None and np.isfinite(se) else f"{'-':>10}"
        lines.append(f"{est:<10}{k:>6}{fmt(b)}{se_s}{fmt(lo)}{fmt(hi)}")
    return "\n".join(lines)


def cmd_fit(cfg: dict, out: Path, seed: int | None, threads: int) -> int:
    data = cfg.get("data")
    if not isinstance(data, dict):
        raise SchemaError("missing 'data' section")
    schema = parse_schema(data)
    ds = load_csv(data["path"], schema)
    base = schema.baseline if schema.baseline is not None else schema.covariates[0]
    model = parse_model(cfg, ds.tau, base)
    lam = parse_reference(cfg.get("reference"), ds)
    learners = cfg.get("learners") or {}
    q_specs = parse_learners(learners.get("outcome"), "outcome", ds.tau)
    g_specs = parse_learners(learners.get("treatment"), "treatment", ds.tau)
    estimators = cfg.get("estimators") or ["sdr"]
    for e in estimators:
        if e not in ESTIMATORS:
            raise SchemaError(f"unknown estimator {e!r} in 'estimators'")
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    folds = int(cfg.get("folds", 5))
    c = float(cfg.get("truncation", 50.0))
    level = float(cfg.get("level", 0.95))
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    rows = []
    for est in estimators:
        if est == "sdr":
            rep = sdr_fit(ds, lam, model, g_specs, q_specs, folds, c, seed=seed, level=level)
        elif est == "tmle":
            rep = tmle_fit(ds, lam, model, g_specs, q_specs, folds, c, seed=seed, level=level)
        elif est == "ipw":
            rep = ipw_fit(ds, lam, model, g_specs, c, folds=None, bootstrap=int(cfg.get("bootstrap", 0)),
                          seed=seed, level=level)
        else:
            rep = gcomp_fit(ds, lam, model, q_specs, folds, seed=seed)
        (out / f"{est}.json").write_text(rep.to_json(**stamp, terms=list(model.features.terms)) + "\n")
        se = rep.se
        for k in range(model.d):
            rows.append((est, k, rep.beta[k], None if se is None else se[k],
                         None if rep.ci_low is None else rep.ci_low[k],
                         None if rep.ci_high is None else rep.ci_high[k]))
    print(_summary_table(rows))
    return 0


def cmd_simulate(cfg: dict, out: Path, seed: int | None, threads: int) -> int:
    dgp = parse_dgp(cfg.get("dgp"))
    n = int(cfg.get("n", 1000))
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    out.mkdir(parents=True, exist_ok=True)
    ds = dgp.draw(n, seed)
    stamp = _stamp(cfg)
    write_csv(ds, out / "data.csv", comment=f"config_hash={stamp['config_hash']} version={__version__}")
    meta = {**stamp, "dgp": dgp.to_dict(), "dgp_hash": dgp.config_hash(), "n": n, "seed": seed}
    (out / "data.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    print(f"wrote {n} trajectories to {out / 'data.csv'}")
    return 0


def cmd_benchmark(cfg: dict, out: Path, seed: int | None, threads: int) -> int:
    from lmsm.sim.harness import SCENARIOS, default_model, run_scenario
    from lmsm.sim.oracle import analytic_nuisances, load_truth, marginal_reference

    dgp = parse_dgp(cfg.get("dgp"))
    model = default_model(dgp.tau)
    lam = marginal_reference(dgp)
    truth = cfg.get("truth", "exact")
    if truth == "exact":
        beta_star = analytic_nuisances(dgp, model, lam).beta()
    elif truth == "pinned":
        beta_star = load_truth(dgp, model).beta
    else:
        raise SchemaError("truth must be 'exact' or 'pinned'")
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    scen = cfg.get("scenarios", [1, 2, 3, 4, 5])
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    all_rows = []
    for s in scen:
        if s not in SCENARIOS:
            raise SchemaError(f"unknown scenario {s!r}; choose from {sorted(SCENARIOS)}")
        rep = run_scenario(dgp, SCENARIOS[s], tuple(cfg.get("estimators", ("sdr", "tmle", "ipw"))),
                           tuple(cfg.get("n_grid", (250, 500, 1000, 2000))), int(cfg.get("S", 200)), seed,
                           beta_star=beta_star, model=model, lam=lam, threads=threads,
                           folds=int(cfg.get("folds", 5)), c=float(cfg.get("truncation", 50.0)))
        rep.meta.update(stamp)
        rep.to_json(out / f"scenario_{s}.json")
        all_rows.extend(rep.rows())
    with open(out / "benchmark.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} version={__version__}\n")
        fh.write("scenario,estimator,n,metric,value\n")
        for r in all_rows:
            fh.write(f"{r['scenario']},{r['estimator']},{r['n']},{r['metric']},{float(r['value'])!r}\n")
    _write_table(out / "table.csv", all_rows, stamp)
    wide = [r for r in all_rows if r["metric"] in ("sqrt_n_bias", "n_mse", "coverage")]
    print(f"{'scenario':<9}{'estimator':<10}{'n':>6}{'metric':>13}{'value':>10}")
    for r in wide:
        print(f"{r['scenario']:<9}{r['estimator']:<10}{r['n']:>6}{r['metric']:>13}{float(r['value']):10.3f}")
    return 0


TABLE_METRICS = ("sqrt_n_bias", "n_mse", "coverage")


def _write_table(path: Path, rows, stamp: dict) -> None:
    """Wide layout: one row per (metric, n), one column per (scenario, estimator)."""
    cols = sorted({(r["scenario"], r["estimator"]) for r in rows}, key=lambda c: (int(c[0]) if c[0].isdigit()
                                                                                  else c[0], c[1]))
    cell = {(r["metric"], r["n"], r["scenario"], r["estimator"]): float(r["value"]) for r in rows}
    ns = sorted({r["n"] for r in rows})
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} version={__version__}\n")
        fh.write(",".join(["metric", "n"] + [f"s{s}_{e}" for s, e in cols]) + "\n")
        for m in TABLE_METRICS:
            for n in ns:
                vals = [repr(cell.get((m, n, s, e), float("nan"))) for s, e in cols]
                fh.write(",".join([m, str(n)] + vals) + "\n")


def cmd_truth(cfg: dict, out: Path, seed: int | None, threads: int) -> int:
    from lmsm.sim.harness import default_model
    from lmsm.sim.oracle import analytic_nuisances, pin_truth, true_beta_oracle

    dgp = parse_dgp(cfg.get("dgp"))
    model = default_model(dgp.tau)
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    an = analytic_nuisances(dgp, model)
    rec = true_beta_oracle(dgp, model, n_oracle=int(cfg.get("n_oracle", 10**6)), seed=seed, an=an)
    out.mkdir(parents=True, exist_ok=True)
    doc = {**_stamp(cfg), **rec.to_dict(), "exact_beta": an.beta().tolist()}
    (out / "truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if cfg.get("pin", False):
        print(f"pinned to {pin_truth(rec, cfg.get('fixture'))}")
    print(f"beta* = {rec.beta.tolist()} (se {rec.se.tolist()}); exact {doc['exact_beta']}")
    return 0


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "benchmark": cmd_benchmark, "truth": cmd_truth}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmsm", description="Longitudinal MSM estimation and simulation")
    p.add_argument("--version", action="version", version=f"lmsm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML configuration file")
        sp.add_argument("--out", default="lmsm_out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=0, help="worker processes (0 = all cores)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_report(exc: BaseException, out: Path | None, code: int) -> None:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "version": __version__}
    text = json.dumps(doc, indent=2)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.command)
        return COMMANDS[args.command](cfg, out, args.seed, args.threads)
    except (LmsmError, ValueError, KeyError, TypeError) as exc:
        if not isinstance(exc, LmsmError) and not _from_config(exc):
            _error_report(exc, out, 2)
            traceback.print_exc()
            return 2
        _error_report(exc, out, 1)
        return 1
    except Exception as exc:  # noqa: BLE001
        _error_report(exc, out, 2)
        traceback.print_exc()
        return 2


def _from_config(exc: BaseException) -> bool:
    """Plain ``ValueError``/``TypeError`` raised while converting config values count as user errors."""
    tb = traceback.extract_tb(exc.__traceback__)
    return any(f.name.startswith(("parse_", "load_config", "cmd_")) for f in tb[-2:])


if __name__ == "__main__":
    sys.exit(main())
