"""Discrete sequential data-generating processes.

A process draws, in chronological order, ``L_1, A_1, L_2, A_2, ..., L_tau,
A_tau, Y`` with every ``L_t`` and ``A_t`` scalar and finitely supported and
``Y`` binary.  Subclasses supply three vectorized kernels:

* ``l_pmf(t, L, A)``  -- law of ``L_t`` given past ``L`` ``(m, t-1)`` and ``A`` ``(m, t-1)``
* ``a_pmf(t, L, A)``  -- law of ``A_t`` given ``L`` ``(m, t)`` and ``A`` ``(m, t-1)``
* ``y_mean(L, A)``    -- ``P(Y = 1 | L, A)`` for complete ``(m, tau)`` histories
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, softmax

from lmsm.data import TrajectoryDataset, TreatmentSupport
from lmsm.errors import ContractError


def _lag(X: np.ndarray, k: int) -> np.ndarray:
    """Column ``t-k`` of a ``(m, t-1)`` past block; zeros where the lag is undefined."""
    j = X.shape[1] - k  # X holds times 1..t-1, so time t-k sits at index t-1-k
    if j < 0:
        return np.zeros(X.shape[0])
    return X[:, j].astype(float)


class SequentialDgp:
    """Shared sampling, hashing and support logic."""

    tau: int

    @property
    def a_levels(self) -> tuple[tuple[int, ...], ...]:
        raise NotImplementedError

    @property
    def l_levels(self) -> tuple[tuple[int, ...], ...]:
        raise NotImplementedError

    def l_pmf(self, t: int, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def a_pmf(self, t: int, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def y_mean(self, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def support(self) -> TreatmentSupport:
        return TreatmentSupport(self.a_levels)

    def to_dict(self) -> dict:
        return {"kind": type(self).__name__, **asdict(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def draw_arrays(self, n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw ``(L, A, Y)`` arrays of shapes ``(n, tau)``, ``(n, tau)``, ``(n,)``."""
        if n < 1:
            raise ContractError("n must be at least 1")
        rng = np.random.default_rng(seed)
        L = np.zeros((n, self.tau), dtype=np.int64)
        A = np.zeros((n, self.tau), dtype=np.int64)
        for t in range(1, self.tau + 1):
            L[:, t - 1] = _categorical(rng, self.l_pmf(t, L[:, : t - 1], A[:, : t - 1]), self.l_levels[t - 1])
            A[:, t - 1] = _categorical(rng, self.a_pmf(t, L[:, :t], A[:, : t - 1]), self.a_levels[t - 1])
        Y = (rng.random(n) < self.y_mean(L, A)).astype(float)
        return L, A, Y

    def draw(self, n: int, seed) -> TrajectoryDataset:
        L, A, Y = self.draw_arrays(n, seed)
        return TrajectoryDataset.from_arrays([L[:, t] for t in range(self.tau)], A, Y, support=self.support)


def _categorical(rng, P: np.ndarray, levels) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    u = rng.random(P.shape[0])[:, None] * cum[:, -1:]
    idx = np.minimum((u > cum).sum(axis=1), P.shape[1] - 1)
    return np.asarray(levels)[idx]


def draw_dataset(cfg: SequentialDgp, n: int, seed) -> TrajectoryDataset:
    """``n`` i.i.d. trajectories from ``cfg``; identical ``(cfg, n, seed)`` give identical data."""
    return cfg.draw(n, seed)


# ---------------------------------------------------------------------------
# four-period, five-level process


def _reference_constants() -> tuple:
    """Default treatment-kernel constants ``c[i, j, t]`` (level, term, time).

    Each term's coefficient is a slope in the level ``i`` around the middle
    level 2, so a positive coefficient pushes mass toward high doses.  Past
    dose carries over (persistence), and a high-risk covariate raises the dose
    (confounding by indication).  The intercept tilt keeps every level's
    marginal probability well above 0.05 at every time.  The ``L_1`` coefficient at ``t=1`` is smaller
    because ``L_1`` ranges over ``0..4`` rather than ``{0, 1}``.
    """
    c = np.zeros((5, 6, 4))
    slope = np.arange(5) - 2.0
    for t in range(4):
        # mild preference for middle doses, tilted to offset the upward pull of
        # the always non-negative terms below
        c[:, 0, t] = -0.15 * slope ** 2 - (0.3 if t == 0 else 0.7) * slope
        c[:, 1, t] = 0.9 * slope               # A_{t-1}/4
        c[:, 2, t] = (0.15 if t == 0 else 0.35) * slope   # L_t
        c[:, 3, t] = 0.3 * slope               # A_{t-2}/4
        c[:, 4, t] = -0.25 * slope             # A_{t-1}/4 * L_t
        c[:, 5, t] = (0.08 if t == 1 else 0.2) * slope    # L_{t-1}
    return tuple(tuple(tuple(float(x) for x in row) for row in lvl) for lvl in c)


@dataclass(frozen=True)
class DgpConfig(SequentialDgp):
    """Four periods, five dose levels, binary time-varying covariates, binary outcome.

    Parameters
    ----------
    constants : nested tuple, shape (5, 6, 4)
        ``c[i, j, t]`` for level ``i``, kernel term ``j`` and time ``t``; the
        terms are ``1, A_{t-1}/4, L_t, A_{t-2}/4, A_{t-1}/4 * L_t, L_{t-1}``.
    l1_probs : tuple of 5 floats
        Law of ``L_1`` over ``{0, ..., 4}``.
    seed : int
        Master seed for harness runs using this configuration.
    """

    constants: tuple = _reference_constants()
    l1_probs: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    seed: int = 20240917
    tau: int = 4

    def __post_init__(self):
        c = np.asarray(self.constants, dtype=float)
        if c.shape != (5, 6, self.tau) or not np.all(np.isfinite(c)):
            raise ContractError(f"constants must be finite with shape (5, 6, {self.tau})")
        p = np.asarray(self.l1_probs, dtype=float)
        if p.shape != (5,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError("l1_probs must be 5 probabilities summing to 1")

    @property
    def a_levels(self):
        return tuple((0, 1, 2, 3, 4) for _ in range(self.tau))

    @property
    def l_levels(self):
        return ((0, 1, 2, 3, 4),) + tuple((0, 1) for _ in range(self.tau - 1))

    def treatment_logits(self, t: int, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        """``log f*_{iA}(H_t)`` for every level ``i``, shape ``(m, 5)``."""
        c = np.asarray(self.constants, dtype=float)[:, :, t - 1]
        a1 = _lag(A, 1) / 4.0
        a2 = _lag(A, 2) / 4.0
        lt = L[:, t - 1].astype(float)
        l1 = _lag(L[:, : t - 1], 1)
        terms = np.column_stack([np.ones_like(lt), a1, lt, a2, a1 * lt, l1])
        return terms @ c.T

    def a_pmf(self, t, L, A):
        return softmax(self.treatment_logits(t, L, A), axis=1)

    def l_prob(self, t: int, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        """``P(L_t = 1 | A_{t-1}, L_{t-1}, L_{t-2})`` for ``t >= 2``."""
        a1 = _lag(A, 1)
        l1 = _lag(L, 1)
        l2 = _lag(L, 2)
        return expit(-0.5 * a1 + l2 + 2.0 * l1 - a1 * l1 + l2 * l1)

    def l_pmf(self, t, L, A):
        m = L.shape[0]
        if t == 1:
            return np.broadcast_to(np.asarray(self.l1_probs, dtype=float), (m, 5)).copy()
        p = self.l_prob(t, L, A)
        return np.column_stack([1.0 - p, p])

    def alpha(self, L: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Outcome log-odds from the complete history."""
        L = L.astype(float)
        A = A.astype(float)
        L1, L2, L3, L4 = L.T
        A1, A2, A3, A4 = A.T
        return (-2.5 + 5.0 * (L4 + L3 + L2 + L1 / 5.0) + 5.0 * L4 * L3 * L2 * L1 / 5.0
                - A4 * (5.0 - 2.0 * A3 * L4 * L3)
                - A3 * (4.0 - 1.5 * A2 * L3 * L2)
                - A2 * (3.0 - A1 * L2 * L1 / 5.0)
                - A1 * (2.0 - L1 / 5.0))

    def y_mean(self, L, A):
        return expit(self.alpha(L, A))


# ---------------------------------------------------------------------------
# small binary process for oracle tests


@dataclass(frozen=True)
class ToyDgp(SequentialDgp):
    """Binary ``L_t`` and ``A_t`` with logistic kernels in the immediate past.

    ``P(L_t=1) = expit(l0 + l_a A_{t-1} + l_l L_{t-1})``,
    ``P(A_t=1) = expit(a0 + a_l L_t + a_a A_{t-1})`` and
    ``P(Y=1) = expit(y0 + y_a sum A + y_l sum L + y_al A_tau L_tau)``.
    """

    tau: int = 2
    l0: float = -0.2
    l_a: float = -0.8
    l_l: float = 1.0
    a0: float = -0.3
    a_l: float = 1.0
    a_a: float = 0.8
    y0: float = -0.5
    y_a: float = -0.7
    y_l: float = 1.2
    y_al: float = 0.6

    def __post_init__(self):
        if self.tau < 1:
            raise ContractError("tau must be positive")

    @property
    def a_levels(self):
        return tuple((0, 1) for _ in range(self.tau))

    @property
    def l_levels(self):
        return tuple((0, 1) for _ in range(self.tau))

    def l_pmf(self, t, L, A):
        p = expit(self.l0 + self.l_a * _lag(A, 1) + self.l_l * _lag(L, 1))
        return np.column_stack([1.0 - p, p])

    def a_pmf(self, t, L, A):
        p = expit(self.a0 + self.a_l * L[:, t - 1] + self.a_a * _lag(A, 1))
        return np.column_stack([1.0 - p, p])

    def y_mean(self, L, A):
        return expit(self.y0 + self.y_a * A.sum(axis=1) + self.y_l * L.sum(axis=1)
                     + self.y_al * A[:, -1] * L[:, -1])
