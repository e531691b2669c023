"""Regression and probability-mass learners.

A small self-contained zoo standing in for stacked ensembles:

* ``mean`` -- (weighted) sample mean / empirical class frequencies, ignores X
* ``cell_mean`` -- saturated cell means over distinct rows of X
* ``linear_ridge`` -- ridge least squares
* ``logistic_ridge`` -- ridge logistic regression by IRLS, for y in [0, 1]
* ``multinomial_softmax`` -- ridge softmax regression (L-BFGS)
* ``boosted_stumps`` -- squared-loss gradient boosting of depth-1 trees
* ``knn`` -- k nearest neighbours on standardised features
* ``stack`` -- discrete super learner picked by V-fold cross-validation

All pmf outputs are floored at ``PMF_FLOOR`` and sum to one.
"""

from __future__ import annotations

import itertools

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from lmsm.crossfit import make_folds, training_rows
from lmsm.errors import ContractError

PMF_FLOOR = 1e-12
PROB_CLIP = 1e-12

REGRESSION_KINDS = ("mean", "cell_mean", "linear_ridge", "logistic_ridge", "boosted_stumps", "knn", "stack")
PMF_KINDS = ("mean", "cell_mean", "multinomial_softmax", "knn", "stack")
_KNOWN_HYPER = {
    "mean": set(),
    "cell_mean": set(),
    "linear_ridge": {"lam", "interactions", "fit_intercept"},
    "logistic_ridge": {"lam", "interactions", "max_iter", "tol"},
    "multinomial_softmax": {"lam", "interactions", "max_iter"},
    "boosted_stumps": {"rounds", "learning_rate", "min_leaf", "subsample", "seed", "interactions"},
    "knn": {"k"},
    "stack": set(),
}


@dataclass(frozen=True)
class LearnerSpec:
    """A learner kind with hyperparameters; ``kind='stack'`` holds candidates."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)
    candidates: tuple = ()
    folds: int = 3

    def __post_init__(self):
        if self.kind not in _KNOWN_HYPER:
            raise ContractError(f"unknown learner kind {self.kind!r}")
        hp = dict(self.hyperparameters)
        unknown = set(hp) - _KNOWN_HYPER[self.kind]
        if unknown:
            raise ContractError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        if hp.get("lam") is not None and hp["lam"] < 0:
            raise ContractError("ridge penalty lam must be >= 0")
        if int(hp.get("rounds", 1)) < 1:
            raise ContractError("boosted_stumps needs rounds >= 1")
        if int(hp.get("k", 1)) < 1:
            raise ContractError("knn needs k >= 1")
        if self.kind == "stack":
            if not self.candidates:
                raise ContractError("a stack needs at least one candidate")
            if self.folds < 2:
                raise ContractError("stack cross-validation needs folds >= 2")
            object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "hyperparameters", hp)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.hyperparameters.items())), self.candidates, self.folds))

    @property
    def label(self) -> str:
        if self.kind == "stack":
            return "stack(" + ",".join(c.label for c in self.candidates) + ")"
        return self.kind


# ---------------------------------------------------------------------------
# helpers


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ContractError("X must be a 2-d matrix")
    if not np.all(np.isfinite(X)):
        raise ContractError("X contains non-finite entries")
    return X


def _weights(w, n) -> np.ndarray:
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != n or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractError("weights must be finite, non-negative and one per row")
    if w.sum() <= 0:
        raise ContractError("weights sum to zero")
    return w


def floor_pmf(P, floor=PMF_FLOOR) -> np.ndarray:
    """Renormalise rows to sum to one with every entry at least ``floor``."""
    P = np.clip(np.asarray(P, dtype=float), 0.0, None)
    P = P / P.sum(axis=1, keepdims=True)
    K = P.shape[1]
    return P * (1.0 - K * floor) + floor


class _Design:
    """Standardisation plus optional products of distinct columns.

    ``interactions`` is the highest product order: ``False``/``1`` for none,
    ``True``/``2`` for pairwise, ``3`` to add three-way products.
    """

    def __init__(self, X, w, interactions=False):
        self.interactions = 2 if interactions is True else int(interactions)
        Z = self._expand(X)
        wn = w / w.sum()
        self.center = wn @ Z
        sd = np.sqrt(wn @ (Z - self.center) ** 2)
        self.scale = np.where(sd > 1e-12, sd, 1.0)
        self.p_in = X.shape[1]

    def _expand(self, X):
        if self.interactions < 2 or X.shape[1] < 2:
            return X
        parts = [X]
        for order in range(2, min(self.interactions, X.shape[1]) + 1):
            idx = np.array(list(itertools.combinations(range(X.shape[1]), order)))
            parts.append(np.prod(X[:, idx], axis=2))
        return np.hstack(parts)

    def __call__(self, X):
        return (self._expand(X) - self.center) / self.scale


class FittedLearner:
    """Base class: a fitted predictor of a conditional mean or a pmf."""

    kind = "base"
    n_features: int = 0
    n_outputs: int = 1

    def _check(self, X):
        X = _as_2d(X)
        if X.shape[1] != self.n_features:
            raise ContractError(f"{self.kind}: X has {X.shape[1]} columns, trained on {self.n_features}")
        return X

    def predict(self, X) -> np.ndarray:
        raise ContractError(f"{self.kind} learner does not predict conditional means")

    def predict_pmf(self, X) -> np.ndarray:
        raise ContractError(f"{self.kind} learner does not predict pmfs")


# ---------------------------------------------------------------------------
# regression learners


class MeanLearner(FittedLearner):
    kind = "mean"

    def __init__(self, X, y, w, pmf_classes=None):
        self.n_features = X.shape[1]
        if pmf_classes is None:
            self.value = float(w @ y / w.sum())
        else:
            counts = np.bincount(y, weights=w, minlength=pmf_classes)
            self.freq = floor_pmf(counts[None, :])[0]
            self.n_outputs = pmf_classes

    def predict(self, X):
        X = self._check(X)
        return np.full(X.shape[0], self.value)

    def predict_pmf(self, X):
        X = self._check(X)
        return np.tile(self.freq, (X.shape[0], 1))


class CellMeanLearner(FittedLearner):
    """Saturated model: one mean (or pmf) per distinct row of X.

    Rows never seen in training fall back to the pooled mean.
    """

    kind = "cell_mean"

    def __init__(self, X, y, w, pmf_classes=None):
        self.n_features = X.shape[1]
        cells, inv = np.unique(X, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        self._index = {c.tobytes(): k for k, c in enumerate(cells)}
        W = np.bincount(inv, weights=w, minlength=len(cells))
        if pmf_classes is None:
            self.means = np.bincount(inv, weights=w * y, minlength=len(cells)) / W
            self.fallback = float(w @ y / w.sum())
        else:
            self.n_outputs = pmf_classes
            counts = np.zeros((len(cells), pmf_classes))
            np.add.at(counts, (inv, y), w)
            self.means = floor_pmf(counts)
            self.fallback = floor_pmf(np.bincount(y, weights=w, minlength=pmf_classes)[None, :])[0]

    def _lookup(self, X):
        X = np.ascontiguousarray(X)
        return np.array([self._index.get(r.tobytes(), -1) for r in X], dtype=int)

    def predict(self, X):
        k = self._lookup(self._check(X))
        out = np.where(k >= 0, self.means[np.maximum(k, 0)], self.fallback)
        return out

    def predict_pmf(self, X):
        k = self._lookup(self._check(X))
        out = self.means[np.maximum(k, 0)].copy()
        out[k < 0] = self.fallback
        return out


class RidgeLearner(FittedLearner):
    kind = "linear_ridge"

    def __init__(self, X, y, w, lam=None, interactions=False, fit_intercept=True):
        n = X.shape[0]
        self.n_features = X.shape[1]
        self.fit_intercept = bool(fit_intercept)
        lam = 1e-4 * n if lam is None else float(lam)
        if self.fit_intercept:
            self.design = _Design(X, w, interactions)
            Z = self.design(X)
            ybar = w @ y / w.sum()
        else:
            self.design = None
            Z = X
            ybar = 0.0
        G = (Z * w[:, None]).T @ Z
        rhs = (Z * w[:, None]).T @ (y - ybar)
        A = G + lam * np.eye(G.shape[0])
        if lam == 0.0:
            cond = np.linalg.cond(A) if A.size else 1.0
            if not np.isfinite(cond) or cond > 1e12:
                floor = 1e-8 * max(np.trace(G) / max(G.shape[0], 1), 1e-12)
                warnings.warn(f"degenerate ridge system (condition {cond:.3g}); "
                              f"applying regularisation floor {floor:.3g}", RuntimeWarning)
                A = G + floor * np.eye(G.shape[0])
        self.coef = np.linalg.solve(A, rhs) if A.size else np.zeros(0)
        self.intercept = float(ybar)

    def predict(self, X):
        X = self._check(X)
        Z = self.design(X) if self.design is not None else X
        return Z @ self.coef + self.intercept


class LogisticRidgeLearner(FittedLearner):
    """Penalised logistic regression fitted by IRLS; y may be fractional."""

    kind = "logistic_ridge"

    def __init__(self, X, y, w, lam=1.0, interactions=False, max_iter=100, tol=1e-10):
        if np.any((y < 0) | (y > 1)):
            raise ContractError("logistic_ridge needs responses in [0, 1]")
        self.n_features = X.shape[1]
        self.design = _Design(X, w, interactions)
        Z = np.hstack([np.ones((X.shape[0], 1)), self.design(X)])
        pen = np.full(Z.shape[1], float(lam))
        pen[0] = 0.0
        b = np.zeros(Z.shape[1])
        for _ in range(int(max_iter)):
            mu = 1.0 / (1.0 + np.exp(-np.clip(Z @ b, -35, 35)))
            grad = Z.T @ (w * (y - mu)) - pen * b
            H = (Z * (w * mu * (1 - mu))[:, None]).T @ Z + np.diag(pen) + 1e-12 * np.eye(len(b))
            step = np.linalg.solve(H, grad)
            b = b + step
            if np.max(np.abs(step)) < tol:
                break
        self.coef = b

    def predict(self, X):
        X = self._check(X)
        Z = np.hstack([np.ones((X.shape[0], 1)), self.design(X)])
        p = 1.0 / (1.0 + np.exp(-np.clip(Z @ self.coef, -35, 35)))
        return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


class BoostedStumps(FittedLearner):
    """Least-squares gradient boosting with depth-one trees.

    Split thresholds are midpoints between consecutive distinct feature
    values; a split must leave ``min_leaf`` rows on each side.
    """

    kind = "boosted_stumps"

    def __init__(self, X, y, w, rounds=100, learning_rate=0.1, min_leaf=5, subsample=1.0, seed=0,
                 interactions=False):
        self.n_features = X.shape[1]
        self.expander = _Design(X, w, interactions)
        X = self.expander._expand(X)
        n, p = X.shape
        self.learning_rate = float(learning_rate)
        self.init = float(w @ y / w.sum())
        rng = np.random.default_rng(seed)
        # bin every feature by its distinct values; one bincount per round then
        # scores every (feature, threshold) pair
        uniq, codes = [], np.empty((n, p), dtype=np.int64)
        offset = 0
        starts = []
        for j in range(p):
            u, inv = np.unique(X[:, j], return_inverse=True)
            uniq.append(u)
            codes[:, j] = inv.reshape(-1) + offset
            starts.append(offset)
            offset += len(u)
        B = offset
        flat = codes.ravel()
        feat_of_bin = np.repeat(np.arange(p), [len(u) for u in uniq])
        seg_start = np.asarray(starts)[feat_of_bin]
        last_in_seg = np.r_[feat_of_bin[1:] != feat_of_bin[:-1], True]
        bin_vals = np.concatenate(uniq) if p else np.zeros(0)
        next_vals = np.r_[bin_vals[1:], np.nan]
        thresholds = 0.5 * (bin_vals + next_vals)
        cnt = np.bincount(flat, minlength=B).astype(float)

        def seg_cumsum(v):
            c = np.cumsum(v)
            return c - (c[seg_start] - v[seg_start])

        ccnt = seg_cumsum(cnt)
        tot_cnt = float(n)
        self.features = np.zeros(rounds, dtype=int)
        self.thresholds = np.zeros(rounds)
        self.left = np.zeros(rounds)
        self.right = np.zeros(rounds)
        F = np.full(n, self.init)
        min_leaf = max(int(min_leaf), 1)
        leaf_ok = (~last_in_seg) & (ccnt >= min_leaf) & (tot_cnt - ccnt >= min_leaf)
        for m in range(int(rounds)):
            r = y - F
            wm = w if subsample >= 1.0 else w * (rng.random(n) < subsample)
            if wm.sum() <= 0:
                wm = w
            wr_rep = np.repeat(wm * r, p)
            w_rep = np.repeat(wm, p)
            cw = seg_cumsum(np.bincount(flat, weights=w_rep, minlength=B))
            cr = seg_cumsum(np.bincount(flat, weights=wr_rep, minlength=B))
            W_tot, R_tot = wm.sum(), wm @ r
            wl, wr = cw, W_tot - cw
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = cr**2 / wl + (R_tot - cr) ** 2 / wr
            ok = leaf_ok & (wl > 0) & (wr > 0)
            gain = np.where(ok, gain, -np.inf)
            if not np.isfinite(gain).any():
                self._truncate(m)
                break
            b = int(np.argmax(gain))
            j = int(feat_of_bin[b])
            self.features[m] = j
            self.thresholds[m] = thresholds[b]
            self.left[m] = cr[b] / wl[b]
            self.right[m] = (R_tot - cr[b]) / wr[b]
            F += self.learning_rate * np.where(X[:, j] <= self.thresholds[m], self.left[m], self.right[m])

    def _truncate(self, m):
        self.features = self.features[:m]
        self.thresholds = self.thresholds[:m]
        self.left = self.left[:m]
        self.right = self.right[:m]

    def predict(self, X):
        X = self.expander._expand(self._check(X))
        if len(self.features) == 0:
            return np.full(X.shape[0], self.init)
        go_left = X[:, self.features] <= self.thresholds
        return self.init + self.learning_rate * np.where(go_left, self.left, self.right).sum(axis=1)


class KnnLearner(FittedLearner):
    kind = "knn"

    def __init__(self, X, y, w, k=25, pmf_classes=None):
        self.n_features = X.shape[1]
        self.center = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 1e-12, sd, 1.0)
        self.tree = cKDTree((X - self.center) / self.scale)
        self.k = min(int(k), X.shape[0])
        self.w = w
        if pmf_classes is None:
            self.y = y.astype(float)
        else:
            self.n_outputs = pmf_classes
            self.onehot = np.eye(pmf_classes)[y]

    def _neighbours(self, X):
        X = self._check(X)
        _, idx = self.tree.query((X - self.center) / self.scale, k=self.k)
        return idx.reshape(X.shape[0], self.k)

    def predict(self, X):
        idx = self._neighbours(X)
        w = self.w[idx]
        return (w * self.y[idx]).sum(axis=1) / w.sum(axis=1)

    def predict_pmf(self, X):
        idx = self._neighbours(X)
        w = self.w[idx][:, :, None]
        P = (w * self.onehot[idx]).sum(axis=1) / w.sum(axis=1)
        return floor_pmf(P)


class SoftmaxLearner(FittedLearner):
    """Ridge multinomial logistic regression; intercepts are unpenalised."""

    kind = "multinomial_softmax"

    def __init__(self, X, a, w, n_classes, lam=1.0, interactions=False, max_iter=500):
        n = X.shape[0]
        self.n_features = X.shape[1]
        self.n_outputs = K = n_classes
        self.design = _Design(X, w, interactions)
        Z = self.design(X)
        p = Z.shape[1]
        Y = np.eye(K)[a]
        wsum = w.sum()
        counts = w @ Y
        b0 = np.log(np.maximum(counts, 1e-8 * wsum) / wsum)
        lam = float(lam)

        def objective(theta):
            W = theta[: p * K].reshape(p, K)
            b = theta[p * K:]
            eta = Z @ W + b
            eta -= eta.max(axis=1, keepdims=True)
            E = np.exp(eta)
            s = E.sum(axis=1)
            nll = w @ (np.log(s) - (eta * Y).sum(axis=1))
            P = E / s[:, None]
            G = (P - Y) * w[:, None]
            gW = Z.T @ G + lam * W
            gb = G.sum(axis=0) + 1e-8 * b
            f = nll + 0.5 * lam * np.sum(W**2) + 0.5e-8 * np.sum(b**2)
            return f / wsum, np.concatenate([gW.ravel(), gb]) / wsum

        theta0 = np.concatenate([np.zeros(p * K), b0])
        if p == 0:
            self.W = np.zeros((0, K))
            self.b = b0
            return
        res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                       options={"maxiter": int(max_iter), "gtol": 1e-7, "ftol": 1e-12})
        self.W = res.x[: p * K].reshape(p, K)
        self.b = res.x[p * K:]

    def predict_pmf(self, X):
        X = self._check(X)
        eta = self.design(X) @ self.W + self.b
        eta -= eta.max(axis=1, keepdims=True)
        P = np.exp(eta)
        return floor_pmf(P)


# ---------------------------------------------------------------------------
# public API


def _fit_one(spec: LearnerSpec, X, y, w, pmf_classes=None, seed=0) -> FittedLearner:
    hp = dict(spec.hyperparameters)
    if spec.kind == "mean":
        return MeanLearner(X, y, w, pmf_classes)
    if spec.kind == "cell_mean":
        return CellMeanLearner(X, y, w, pmf_classes)
    if spec.kind == "knn":
        return KnnLearner(X, y, w, pmf_classes=pmf_classes, **hp)
    if pmf_classes is not None:
        if spec.kind == "multinomial_softmax":
            return SoftmaxLearner(X, y, w, pmf_classes, **hp)
        raise ContractError(f"{spec.kind} cannot fit a pmf")
    if spec.kind == "linear_ridge":
        return RidgeLearner(X, y, w, **hp)
    if spec.kind == "logistic_ridge":
        return LogisticRidgeLearner(X, y, w, **hp)
    if spec.kind == "boosted_stumps":
        hp.setdefault("seed", seed)
        return BoostedStumps(X, y, w, **hp)
    raise ContractError(f"{spec.kind} cannot fit a regression")


def fit_regression(spec: LearnerSpec, X, y, w=None, seed: int = 0) -> FittedLearner:
    """Fit a conditional-mean learner of ``y`` on ``X``."""
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0] or X.shape[0] < 1:
        raise ContractError("X and y must have the same, positive, number of rows")
    if not np.all(np.isfinite(y)):
        raise ContractError("y contains non-finite entries")
    w = _weights(w, X.shape[0])
    if spec.kind == "stack":
        loss = "cross_entropy" if spec.candidates and all(
            c.kind == "logistic_ridge" for c in spec.candidates) else "squared"
        return cv_select(spec.candidates, X, y, spec.folds, loss, w=w, seed=seed)
    if spec.kind not in REGRESSION_KINDS:
        raise ContractError(f"{spec.kind} is not a regression learner")
    return _fit_one(spec, X, y, w, seed=seed)


def fit_pmf(spec: LearnerSpec, X, a, n_classes: int | None = None, w=None, seed: int = 0) -> FittedLearner:
    """Fit a conditional pmf of integer codes ``a`` in ``0..K-1`` given ``X``."""
    X = _as_2d(X)
    a = np.asarray(a).reshape(-1)
    if a.shape[0] != X.shape[0] or X.shape[0] < 1:
        raise ContractError("X and a must have the same, positive, number of rows")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.round(a)):
            raise ContractError("class codes must be integers")
        a = a.astype(np.int64)
    K = int(a.max()) + 1 if n_classes is None else int(n_classes)
    if a.min() < 0 or a.max() >= K:
        raise ContractError(f"class codes must lie in 0..{K - 1}")
    w = _weights(w, X.shape[0])
    if spec.kind == "stack":
        return cv_select(spec.candidates, X, a, spec.folds, "multinomial", w=w, seed=seed, n_classes=K)
    if spec.kind not in PMF_KINDS:
        raise ContractError(f"{spec.kind} is not a pmf learner")
    return _fit_one(spec, X, a, w, pmf_classes=K, seed=seed)


def predict(f: FittedLearner, X) -> np.ndarray:
    return f.predict(X)


def predict_pmf(f: FittedLearner, X) -> np.ndarray:
    return f.predict_pmf(X)


def cv_loss(loss: str, y, pred, w=None) -> float:
    """Weighted mean held-out loss."""
    y = np.asarray(y)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if loss == "squared":
        per = (y - pred) ** 2
    elif loss == "cross_entropy":
        p = np.clip(pred, PROB_CLIP, 1 - PROB_CLIP)
        per = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    elif loss == "multinomial":
        per = -np.log(pred[np.arange(len(y)), y])
    else:
        raise ContractError(f"unknown loss {loss!r}")
    return float(w @ per / w.sum())


class SelectedLearner(FittedLearner):
    """Outcome of :func:`cv_select`: the refitted winner plus its CV record."""

    kind = "stack"

    def __init__(self, fitted: FittedLearner, selected: LearnerSpec, cv_losses: list[float]):
        self.fitted = fitted
        self.selected = selected
        self.cv_losses = cv_losses
        self.n_features = fitted.n_features
        self.n_outputs = fitted.n_outputs

    def predict(self, X):
        return self.fitted.predict(X)

    def predict_pmf(self, X):
        return self.fitted.predict_pmf(X)


def cv_select(stack, X, y_or_a, folds: int, loss: str, w=None, seed: int = 0,
              n_classes: int | None = None) -> SelectedLearner:
    """Discrete super learner.

    Each candidate is scored by its pooled ``folds``-fold cross-validated
    loss; the minimiser (first in stack order on ties) is refitted on all rows.
    """
    X = _as_2d(X)
    n = X.shape[0]
    stack = list(stack)
    if not stack:
        raise ContractError("empty stack")
    if folds < 2 or n < folds:
        raise ContractError(f"cv_select needs 2 <= folds <= n (folds={folds}, n={n})")
    w = _weights(w, n)
    pmf = loss == "multinomial"
    y = np.asarray(y_or_a)
    if pmf and n_classes is None:
        n_classes = int(y.max()) + 1
    losses: list[float] = []
    if len(stack) == 1:
        losses = [float("nan")]
    else:
        fa = make_folds(n, folds, seed)
        for spec in stack:
            pred = np.zeros((n, n_classes)) if pmf else np.zeros(n)
            for j in range(folds):
                tr = training_rows(fa, j)
                va = fa.validation_rows(j)
                if pmf:
                    f = fit_pmf(spec, X[tr], y[tr], n_classes, w=w[tr], seed=seed)
                    pred[va] = f.predict_pmf(X[va])
                else:
                    f = fit_regression(spec, X[tr], y[tr], w=w[tr], seed=seed)
                    pred[va] = f.predict(X[va])
            losses.append(cv_loss(loss, y, pred, w))
    best = int(np.nanargmin(losses)) if len(stack) > 1 else 0
    chosen = stack[best]
    if pmf:
        fitted = fit_pmf(chosen, X, y, n_classes, w=w, seed=seed)
    else:
        fitted = fit_regression(chosen, X, y, w=w, seed=seed)
    return SelectedLearner(fitted, chosen, losses)


def learner_info(f: FittedLearner) -> dict[str, Any]:
    if isinstance(f, SelectedLearner):
        return {"kind": "stack", "selected": f.selected.label, "cv_losses": f.cv_losses}
    return {"kind": f.kind}
