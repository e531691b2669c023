"""Working marginal structural model and the ``U_2(gamma) + U_1 = 0`` solver.

The working model is ``m(gamma . phi(abar, v))`` with a canonical
loss/link pair.  ``U_2`` integrates the model over the reference measure
``Lambda(abar, v)``, realised here by a :class:`SequenceLattice` of treatment
paths per distinct baseline value.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lmsm.data import TrajectoryDataset, TreatmentSupport
from lmsm.errors import ContractError, SchemaError, SolverError

CLAMP = 35.0
LINKS = ("logistic", "identity", "log")
CANONICAL_LOSS = {"logistic": "cross_entropy", "identity": "squared", "log": "poisson"}
EXACT_CAP = 10**6


def _clamp(x):
    return np.clip(x, -CLAMP, CLAMP)


def link_eval(link: str, x):
    """Inverse link ``m(x)``; the linear predictor is clamped to +/-35 first."""
    x = np.asarray(x, dtype=float)
    if link == "logistic":
        return 1.0 / (1.0 + np.exp(-_clamp(x)))
    if link == "identity":
        return x.copy() if x.ndim else float(x)
    if link == "log":
        return np.exp(_clamp(x))
    raise ContractError(f"unsupported link {link!r}; choose from {LINKS}")


def link_deriv(link: str, x):
    """``m'(x)``."""
    x = np.asarray(x, dtype=float)
    if link == "logistic":
        m = link_eval(link, x)
        return m * (1.0 - m)
    if link == "identity":
        return np.ones_like(x) if x.ndim else 1.0
    if link == "log":
        return np.exp(_clamp(x))
    raise ContractError(f"unsupported link {link!r}; choose from {LINKS}")


def canonical_loss(link: str, theta, mu):
    """Loss paired with ``link`` so that ``dL/dx = m(x) - theta``.

    The squared loss carries a factor 1/2 for that reason.
    """
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if link == "logistic":
        return -theta * np.log(mu) - (1.0 - theta) * np.log1p(-mu)
    if link == "identity":
        return 0.5 * (theta - mu) ** 2
    if link == "log":
        return -theta * np.log(mu) + mu
    raise ContractError(f"unsupported link {link!r}; choose from {LINKS}")


# ---------------------------------------------------------------------------
# feature map grammar

_TERM_RE = re.compile(r"^(intercept|sum_treatment|mean_treatment|per_time_treatment|treatment_\d+|baseline:[\w.\-]+)$")


@dataclass(frozen=True)
class FeatureMap:
    """Declarative ``phi(abar, v)``.

    Terms are ``intercept``, ``sum_treatment``, ``mean_treatment``,
    ``per_time_treatment`` (one column per time point), ``treatment_<t>``
    (the single column ``a_t``), ``baseline:<col>``
    and products of single-column terms written ``a*b``.
    """

    terms: tuple[str, ...]
    tau: int
    baseline_names: tuple[str, ...] = ()

    def __post_init__(self):
        terms = tuple(t.replace(" ", "") for t in self.terms)
        if not terms:
            raise SchemaError("feature map needs at least one term")
        for term in terms:
            factors = term.split("*")
            for f in factors:
                if not _TERM_RE.match(f):
                    raise SchemaError(f"unknown feature term {f!r}")
                if f.startswith("treatment_") and not 1 <= int(f[10:]) <= self.tau:
                    raise SchemaError(f"feature {f!r} names a time outside 1..{self.tau}")
                if f.startswith("baseline:") and f[9:] not in self.baseline_names:
                    raise SchemaError(f"feature {f!r} names a column that is not a baseline covariate")
            if len(factors) > 1 and "per_time_treatment" in factors:
                raise SchemaError("per_time_treatment cannot appear inside a product")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "baseline_names", tuple(self.baseline_names))

    @property
    def d(self) -> int:
        return sum(self.tau if t == "per_time_treatment" else 1 for t in self.terms)

    @property
    def uses_baseline(self) -> bool:
        return any("baseline:" in t for t in self.terms)

    def _single(self, name, abar, v):
        if name == "intercept":
            return np.ones(abar.shape[0])
        if name == "sum_treatment":
            return abar.sum(axis=1)
        if name == "mean_treatment":
            return abar.sum(axis=1) / self.tau
        if name.startswith("treatment_"):
            return abar[:, int(name[10:]) - 1]
        if name.startswith("baseline:"):
            return v[:, self.baseline_names.index(name[9:])]
        raise SchemaError(name)

    def __call__(self, abar, v=None) -> np.ndarray:
        abar = np.asarray(abar, dtype=float)
        if abar.ndim == 1:
            abar = abar[None, :]
        if abar.shape[1] != self.tau:
            raise ContractError(f"treatment paths have {abar.shape[1]} columns, expected {self.tau}")
        if v is None:
            v = np.zeros((abar.shape[0], len(self.baseline_names)))
        v = np.asarray(v, dtype=float).reshape(abar.shape[0], -1)
        cols = []
        for term in self.terms:
            if term == "per_time_treatment":
                cols.extend(abar.T)
                continue
            col = np.ones(abar.shape[0])
            for f in term.split("*"):
                col = col * self._single(f, abar, v)
            cols.append(col)
        return np.column_stack(cols)


@dataclass(frozen=True)
class WorkingModel:
    """The triple ``(m, L, phi)``."""

    link: str
    features: FeatureMap

    def __post_init__(self):
        if self.link not in LINKS:
            raise ContractError(f"unsupported link {self.link!r}; choose from {LINKS}")

    @property
    def d(self) -> int:
        return self.features.d

    @property
    def loss_tag(self) -> str:
        return CANONICAL_LOSS[self.link]

    def mean(self, x):
        return link_eval(self.link, x)

    def mean_deriv(self, x):
        return link_deriv(self.link, x)

    def phi(self, abar, v=None):
        return self.features(abar, v)


# ---------------------------------------------------------------------------
# reference measure


class ReferenceMeasure:
    """``Lambda``: per-time conditional pmfs ``lambda_t(a_t | abar_{t-1}, v)``.

    Subclasses implement :meth:`pmf`, returning an ``(m, K_t)`` matrix whose
    columns follow ``support.levels[t-1]``.  The ``v`` marginal is always the
    empirical distribution of the baseline covariates.
    """

    provenance = "fixed"
    depends_on_past = False
    depends_on_v = False

    def __init__(self, support: TreatmentSupport):
        self.support = support

    def pmf(self, t: int, abar_prev, v) -> np.ndarray:
        raise NotImplementedError

    def prob(self, t: int, a_t, abar_prev, v) -> np.ndarray:
        """``lambda_t`` evaluated at the given treatment codes."""
        P = self.pmf(t, abar_prev, v)
        idx = self.support.index(t, a_t)
        return P[np.arange(P.shape[0]), idx]


class FixedReference(ReferenceMeasure):
    """User-given marginal pmf per time point."""

    provenance = "fixed"

    def __init__(self, support: TreatmentSupport, pmfs: Sequence[Sequence[float]]):
        super().__init__(support)
        if len(pmfs) != support.tau:
            raise ContractError("need one pmf per time point")
        self.pmfs = []
        for t, p in enumerate(pmfs, start=1):
            p = np.asarray(p, dtype=float)
            if p.shape != (support.size(t),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-10:
                raise ContractError(f"lambda_{t} must be a pmf over {support.size(t)} levels")
            self.pmfs.append(p)

    def pmf(self, t, abar_prev, v):
        m = np.asarray(v).shape[0]
        return np.broadcast_to(self.pmfs[t - 1], (m, self.pmfs[t - 1].size))


class MarginalReference(FixedReference):
    """Empirical marginal pmf of ``A_t`` in a sample."""

    provenance = "fitted-marginal"

    @classmethod
    def fit(cls, ds: TrajectoryDataset) -> "MarginalReference":
        pmfs = []
        for t in range(1, ds.tau + 1):
            idx = ds.support.index(t, ds.treatments[:, t - 1])
            pmfs.append(np.bincount(idx, minlength=ds.support.size(t)) / ds.n)
        return cls(ds.support, pmfs)


class ConditionalReference(ReferenceMeasure):
    """Intercept-plus-past-treatment softmax fits of ``A_t`` on one-hot ``abar_{t-1}``."""

    provenance = "fitted-conditional"
    depends_on_past = True

    def __init__(self, support, models, marginal):
        super().__init__(support)
        self.models = models
        self.marginal = marginal

    def _design(self, t, abar_prev):
        abar_prev = np.asarray(abar_prev).reshape(-1, t - 1)
        cols = []
        for s in range(1, t):
            idx = self.support.index(s, abar_prev[:, s - 1])
            cols.append(np.eye(self.support.size(s))[idx][:, 1:])
        return np.hstack(cols)

    @classmethod
    def fit(cls, ds: TrajectoryDataset, penalty: float = 1e-3) -> "ConditionalReference":
        from lmsm.learners import LearnerSpec, fit_pmf

        marginal = MarginalReference.fit(ds)
        self = cls(ds.support, {}, marginal)
        spec = LearnerSpec("multinomial_softmax", {"lam": penalty})
        for t in range(2, ds.tau + 1):
            X = self._design(t, ds.treatments[:, : t - 1])
            a = ds.support.index(t, ds.treatments[:, t - 1])
            self.models[t] = fit_pmf(spec, X, a, n_classes=ds.support.size(t))
        return self

    def pmf(self, t, abar_prev, v):
        if t == 1:
            return self.marginal.pmf(1, None, v)
        return self.models[t].predict_pmf(self._design(t, abar_prev))


# ---------------------------------------------------------------------------
# lattice realising the Lambda integral


@dataclass
class SequenceLattice:
    """Treatment paths with ``Lambda`` weights, grouped by distinct baseline value.

    ``paths[g]`` is ``(P, tau)``; ``weights[g]`` sums to one; ``group_weights``
    is the empirical distribution of ``V`` over the groups.
    """

    paths: np.ndarray
    weights: np.ndarray
    v_values: np.ndarray
    group_weights: np.ndarray
    mode: str = "exact"
    _phi_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[1]

    def phi(self, model: WorkingModel) -> np.ndarray:
        """``(G, P, d)`` features, cached per feature map."""
        key = model.features
        if key not in self._phi_cache:
            G, P, tau = self.paths.shape
            v = np.repeat(self.v_values, P, axis=0)
            self._phi_cache[key] = model.phi(self.paths.reshape(G * P, tau), v).reshape(G, P, -1)
        return self._phi_cache[key]


def _all_paths(support: TreatmentSupport) -> np.ndarray:
    return np.array(list(itertools.product(*support.levels)), dtype=np.int64).reshape(-1, support.tau)


def lattice_from_v(support, lam: ReferenceMeasure, v, v_weights=None, mode="exact",
                   mc_draws=10_000, seed=0, cap=EXACT_CAP) -> SequenceLattice:
    """Build a lattice for explicit baseline values ``v`` with probabilities ``v_weights``."""
    v = np.asarray(v, dtype=float)
    v = v.reshape(v.shape[0], -1)
    G = v.shape[0]
    gw = np.full(G, 1.0 / G) if v_weights is None else np.asarray(v_weights, dtype=float)
    tau = support.tau
    if mode == "exact":
        n_paths = int(np.prod([support.size(t) for t in range(1, tau + 1)], dtype=float))
        if n_paths > cap:
            raise ContractError(f"exact lattice has {n_paths} paths (cap {cap}); use mode='mc'")
        base = _all_paths(support)
        P = base.shape[0]
        paths = np.broadcast_to(base, (G, P, tau)).copy()
        flat = paths.reshape(G * P, tau)
        vv = np.repeat(v, P, axis=0)
        w = np.ones(G * P)
        for t in range(1, tau + 1):
            w *= lam.prob(t, flat[:, t - 1], flat[:, : t - 1], vv)
        weights = w.reshape(G, P)
    elif mode == "mc":
        if mc_draws < 1:
            raise ContractError("mc_draws must be positive")
        rng = np.random.default_rng(seed)
        M = int(mc_draws)
        flat = np.zeros((G * M, tau), dtype=np.int64)
        vv = np.repeat(v, M, axis=0)
        for t in range(1, tau + 1):
            P_t = lam.pmf(t, flat[:, : t - 1], vv)
            cum = np.cumsum(P_t, axis=1)
            u = rng.random(G * M)[:, None] * cum[:, -1:]
            idx = np.minimum((u > cum).sum(axis=1), cum.shape[1] - 1)
            flat[:, t - 1] = np.asarray(support.levels[t - 1])[idx]
        paths = flat.reshape(G, M, tau)
        weights = np.full((G, M), 1.0 / M)
    else:
        raise ContractError(f"unknown lattice mode {mode!r}")
    return SequenceLattice(paths, weights, v, gw, mode)


def build_lattice(support, lam: ReferenceMeasure, dataset: TrajectoryDataset, mode="exact",
                  mc_draws=10_000, seed=0, cap=EXACT_CAP) -> SequenceLattice:
    """Lattice over the empirical distribution of ``V`` in ``dataset``."""
    V = dataset.baseline
    uniq, counts = np.unique(V, axis=0, return_counts=True)
    return lattice_from_v(support, lam, uniq, counts / counts.sum(), mode=mode,
                          mc_draws=mc_draws, seed=seed, cap=cap)


# ---------------------------------------------------------------------------
# U_2 and Newton


def _check_gamma(model, gamma):
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != model.d:
        raise ContractError(f"gamma has dimension {gamma.shape[0]}, model has d={model.d}")
    return gamma


def u2(model: WorkingModel, lattice: SequenceLattice, gamma) -> np.ndarray:
    """``U_2(gamma) = -int m(gamma . phi) phi dLambda``."""
    gamma = _check_gamma(model, gamma)
    phi = lattice.phi(model)
    mu = model.mean(phi @ gamma)
    w = lattice.weights * lattice.group_weights[:, None]
    return -np.einsum("gp,gp,gpk->k", w, mu, phi)


def u2_jacobian(model: WorkingModel, lattice: SequenceLattice, gamma) -> np.ndarray:
    """``dU_2/dgamma = -int m'(gamma . phi) phi phi^T dLambda``."""
    gamma = _check_gamma(model, gamma)
    phi = lattice.phi(model)
    dmu = model.mean_deriv(phi @ gamma)
    w = lattice.weights * lattice.group_weights[:, None] * dmu
    return -np.einsum("gp,gpk,gpl->kl", w, phi, phi)


@dataclass
class NewtonResult:
    beta: np.ndarray
    iterations: int
    residual: float
    trace: list


def newton(residual_fn, jacobian_fn, beta_init, tol=1e-8, max_iter=100) -> NewtonResult:
    """Newton iterations ``b <- b - J(b)^{-1} F(b)`` with step halving.

    A full step is taken whenever it does not increase ``max|F|``;
    otherwise the step is halved up to 30 times.
    """
    beta = np.asarray(beta_init, dtype=float).copy()
    F = residual_fn(beta)
    res = float(np.max(np.abs(F)))
    trace = [res]
    for k in range(max_iter + 1):
        if not np.isfinite(res):
            raise SolverError("residual became non-finite", residual=res, trace=trace)
        if res <= tol:
            return NewtonResult(beta, k, res, trace)
        if k == max_iter:
            break
        J = jacobian_fn(beta)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > 1e14:
            raise SolverError(f"singular Jacobian (condition number {cond:.3g})",
                              residual=res, condition=cond, trace=trace)
        step = np.linalg.solve(J, F)
        t = 1.0
        for _ in range(31):
            cand = beta - t * step
            F_c = residual_fn(cand)
            res_c = float(np.max(np.abs(F_c)))
            if np.isfinite(res_c) and res_c <= res:
                break
            t *= 0.5
        beta, F, res = cand, F_c, res_c
        trace.append(res)
    raise SolverError(f"no convergence after {max_iter} iterations (residual {res:.3g})",
                      residual=res, trace=trace)


def solve_beta(model: WorkingModel, lattice: SequenceLattice, u1_hat, beta_init=None,
               tol: float = 1e-8, max_iter: int = 100) -> NewtonResult:
    """Solve ``U_2(beta) + u1_hat = 0`` by Newton-Raphson."""
    u1_hat = np.asarray(u1_hat, dtype=float).reshape(-1)
    if u1_hat.shape[0] != model.d or not np.all(np.isfinite(u1_hat)):
        raise ContractError("u1_hat must be a finite vector of length d")
    if beta_init is None:
        beta_init = np.zeros(model.d)
    beta_init = _check_gamma(model, beta_init)
    return newton(lambda b: u2(model, lattice, b) + u1_hat,
                  lambda b: u2_jacobian(model, lattice, b),
                  beta_init, tol=tol, max_iter=max_iter)
