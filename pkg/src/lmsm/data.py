"""Longitudinal trajectory data: schema, validation, CSV I/O and history designs.

A record is ``Z = (L_1, A_1, ..., L_tau, A_tau, Y)`` with integer-coded
treatments, fixed-dimension numeric covariates per time point and a real
terminal outcome.  Histories ``H_t`` are flattened in the fixed column order
``(A_1, ..., A_{t-1}, L_1, ..., L_t)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from lmsm.errors import ContractError, DataParseError, SchemaError

__all__ = [
    "Schema",
    "TreatmentSupport",
    "Trajectory",
    "TrajectoryDataset",
    "load_csv",
    "write_csv",
    "history",
    "history_matrix",
]


@dataclass(frozen=True)
class TreatmentSupport:
    """Finite ordered treatment levels, one tuple per time point."""

    levels: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        levels = tuple(tuple(int(a) for a in lv) for lv in self.levels)
        for t, lv in enumerate(levels, start=1):
            if len(lv) == 0:
                raise ContractError(f"empty treatment support at t={t}")
            if len(set(lv)) != len(lv):
                raise ContractError(f"duplicate treatment levels at t={t}: {lv}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def uniform(cls, tau: int, levels: Sequence[int]) -> "TreatmentSupport":
        return cls(tuple(tuple(levels) for _ in range(tau)))

    @property
    def tau(self) -> int:
        return len(self.levels)

    def size(self, t: int) -> int:
        return len(self.levels[t - 1])

    def index(self, t: int, codes) -> np.ndarray:
        """Map treatment codes at time ``t`` (1-based) to positions 0..K_t-1."""
        lv = np.asarray(self.levels[t - 1])
        codes = np.asarray(codes)
        order = np.argsort(lv)
        pos = np.searchsorted(lv[order], codes)
        pos = np.clip(pos, 0, len(lv) - 1)
        if not np.all(lv[order][pos] == codes):
            bad = np.setdiff1d(np.unique(codes), lv)
            raise ContractError(f"treatment codes {bad.tolist()} outside support at t={t}")
        return order[pos]


@dataclass(frozen=True)
class Schema:
    """Column roles for a wide-format trajectory file."""

    tau: int
    treatments: tuple[str, ...]
    covariates: tuple[tuple[str, ...], ...]
    outcome: str
    baseline: tuple[str, ...] | None = None
    support: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "treatments", tuple(self.treatments))
        object.__setattr__(self, "covariates", tuple(tuple(c) for c in self.covariates))
        if self.baseline is not None:
            object.__setattr__(self, "baseline", tuple(self.baseline))
        if self.tau < 1:
            raise SchemaError("tau must be a positive integer")
        if len(self.treatments) != self.tau:
            raise SchemaError(f"expected {self.tau} treatment columns, got {len(self.treatments)}")
        if len(self.covariates) != self.tau:
            raise SchemaError(f"expected {self.tau} covariate groups, got {len(self.covariates)}")
        if self.baseline is not None:
            missing = [b for b in self.baseline if b not in self.covariates[0]]
            if missing:
                raise SchemaError(f"baseline columns {missing} are not among the t=1 covariates")
        if self.support is not None and len(self.support) != self.tau:
            raise SchemaError("support must list one level set per time point")

    @classmethod
    def default(cls, tau: int, cov_dims: Sequence[int] | None = None) -> "Schema":
        """Columns ``L1, A1, ..., Ltau, Atau, Y`` (``Lt_k`` when a time point has several)."""
        cov_dims = cov_dims or [1] * tau
        covs = []
        for t, p in enumerate(cov_dims, start=1):
            covs.append((f"L{t}",) if p == 1 else tuple(f"L{t}_{k}" for k in range(1, p + 1)))
        return cls(tau, tuple(f"A{t}" for t in range(1, tau + 1)), tuple(covs), "Y")

    def column_order(self) -> list[str]:
        cols: list[str] = []
        for t in range(self.tau):
            cols.extend(self.covariates[t])
            cols.append(self.treatments[t])
        cols.append(self.outcome)
        return cols


@dataclass(frozen=True)
class Trajectory:
    """One unit's record."""

    covariates: tuple[np.ndarray, ...]
    treatments: np.ndarray
    outcome: float
    baseline: np.ndarray

    @property
    def tau(self) -> int:
        return len(self.treatments)


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """An immutable sample of ``n`` trajectories stored column-wise.

    Attributes
    ----------
    covariates : tuple of ndarray
        ``covariates[t-1]`` is the ``(n, p_t)`` matrix of ``L_t``.
    treatments : ndarray
        ``(n, tau)`` integer treatment codes.
    outcome : ndarray
        ``(n,)`` terminal outcome.
    support : TreatmentSupport
    schema : Schema
    """

    covariates: tuple[np.ndarray, ...]
    treatments: np.ndarray
    outcome: np.ndarray
    support: TreatmentSupport
    schema: Schema
    _baseline_idx: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        A = np.asarray(self.treatments)
        if A.ndim != 2:
            raise ContractError("treatments must be an (n, tau) array")
        n, tau = A.shape
        if n < 1:
            raise ContractError("a dataset needs at least one row")
        if not np.issubdtype(A.dtype, np.integer):
            raise ContractError("treatments must be integer coded")
        covs = tuple(np.asarray(L, dtype=float).reshape(n, -1) for L in self.covariates)
        if len(covs) != tau or self.support.tau != tau or self.schema.tau != tau:
            raise ContractError("covariates, treatments, support and schema disagree on tau")
        Y = np.asarray(self.outcome, dtype=float).reshape(-1)
        if Y.shape[0] != n:
            raise ContractError("outcome length differs from the number of rows")
        if not np.all(np.isfinite(Y)):
            raise ContractError("outcome must be finite")
        for t, L in enumerate(covs, start=1):
            if not np.all(np.isfinite(L)):
                raise ContractError(f"non-finite covariate at t={t}")
            if L.shape[1] != len(self.schema.covariates[t - 1]):
                raise ContractError(f"covariate dimension at t={t} does not match the schema")
        for t in range(1, tau + 1):
            self.support.index(t, A[:, t - 1])
        names = self.schema.covariates[0]
        base = self.schema.baseline if self.schema.baseline is not None else names
        idx = np.array([names.index(b) for b in base], dtype=int)
        for arr in (A, Y, *covs):
            arr.setflags(write=False)
        object.__setattr__(self, "treatments", A)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "outcome", Y)
        object.__setattr__(self, "_baseline_idx", idx)

    @classmethod
    def from_arrays(cls, covariates, treatments, outcome, support=None, schema=None, baseline=None):
        """Build a dataset from in-memory arrays with a default schema."""
        A = np.asarray(treatments)
        if A.ndim == 1:
            A = A[:, None]
        A = A.astype(np.int64)
        n, tau = A.shape
        covs = [np.asarray(L, dtype=float).reshape(n, -1) for L in covariates]
        if schema is None:
            schema = Schema.default(tau, [L.shape[1] for L in covs])
            if baseline is not None:
                schema = Schema(tau, schema.treatments, schema.covariates, schema.outcome,
                                tuple(baseline))
        if support is None:
            support = TreatmentSupport(tuple(tuple(np.unique(A[:, t]).tolist()) for t in range(tau)))
        elif not isinstance(support, TreatmentSupport):
            support = TreatmentSupport(tuple(support))
        return cls(tuple(covs), A, outcome, support, schema)

    @property
    def n(self) -> int:
        return self.treatments.shape[0]

    @property
    def tau(self) -> int:
        return self.treatments.shape[1]

    @property
    def baseline(self) -> np.ndarray:
        """``V``: the selected columns of ``L_1`` (all of them by default)."""
        return self.covariates[0][:, self._baseline_idx]

    def row(self, i: int) -> Trajectory:
        return Trajectory(
            covariates=tuple(L[i] for L in self.covariates),
            treatments=self.treatments[i],
            outcome=float(self.outcome[i]),
            baseline=self.baseline[i],
        )

    def subset(self, rows) -> "TrajectoryDataset":
        rows = np.asarray(rows)
        return TrajectoryDataset(
            tuple(L[rows] for L in self.covariates),
            self.treatments[rows],
            self.outcome[rows],
            self.support,
            self.schema,
        )

    def history_names(self, t: int) -> list[str]:
        names = list(self.schema.treatments[: t - 1])
        for s in range(t):
            names.extend(self.schema.covariates[s])
        return names


def history_matrix(ds: TrajectoryDataset, t: int, rows=None) -> np.ndarray:
    """Stack ``H_t`` for all (or the selected) rows: ``(A_1..A_{t-1}, L_1..L_t)``."""
    if not 1 <= t <= ds.tau:
        raise ContractError(f"time {t} outside 1..{ds.tau}")
    sel = slice(None) if rows is None else np.asarray(rows)
    parts = [ds.treatments[sel, : t - 1].astype(float)]
    parts.extend(ds.covariates[s][sel] for s in range(t))
    return np.hstack(parts)


def history(ds: TrajectoryDataset, i: int, t: int) -> np.ndarray:
    """The flattened history vector ``H_t`` of row ``i``."""
    if not 0 <= i < ds.n:
        raise ContractError(f"row {i} outside 0..{ds.n - 1}")
    return history_matrix(ds, t, [i])[0]


def _parse_treatment(raw: str, col: str, line: int) -> int:
    s = raw.strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        val = float(s)
    except ValueError:
        val = float("nan")
    if np.isfinite(val) and float(val).is_integer():
        return int(val)
    raise DataParseError(f"non-integer treatment value {raw!r} in column {col} (row {line})")


def _parse_real(raw: str, col: str, line: int) -> float:
    s = raw.strip()
    if s == "" or s.upper() in {"NA", "NAN"}:
        raise DataParseError(f"missing value in column {col} (row {line})")
    try:
        val = float(s)
    except ValueError:
        raise DataParseError(f"non-numeric value {raw!r} in column {col} (row {line})") from None
    if not np.isfinite(val):
        raise DataParseError(f"non-finite value in column {col} (row {line})")
    return val


def load_csv(path, schema: Schema) -> TrajectoryDataset:
    """Read a wide-format CSV (header required) into a validated dataset.

    Lines starting with ``#`` are comments.  Rows are numbered from 0 in
    error messages, excluding the header and comments.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataParseError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.column_order() if c not in header]
        if missing:
            raise SchemaError(f"columns missing from {path.name}: {missing}")
        pos = {c: header.index(c) for c in header}
        A_rows, L_rows, Y = [], [], []
        for line, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataParseError(f"row {line} has {len(rec)} fields, header has {len(header)}")
            y_raw = rec[pos[schema.outcome]].strip()
            if y_raw == "" or y_raw.upper() in {"NA", "NAN"}:
                raise DataParseError(f"row {line} has a missing outcome ({schema.outcome})")
            Y.append(_parse_real(y_raw, schema.outcome, line))
            A_rows.append([_parse_treatment(rec[pos[c]], c, line) for c in schema.treatments])
            L_rows.append([[_parse_real(rec[pos[c]], c, line) for c in cols]
                           for cols in schema.covariates])
    if not Y:
        raise DataParseError(f"{path.name} has no data rows")
    n = len(Y)
    A = np.array(A_rows, dtype=np.int64).reshape(n, schema.tau)
    covs = tuple(np.array([r[t] for r in L_rows], dtype=float).reshape(n, -1)
                 for t in range(schema.tau))
    if schema.support is not None:
        support = TreatmentSupport(schema.support)
    else:
        support = TreatmentSupport(tuple(tuple(np.unique(A[:, t]).tolist())
                                         for t in range(schema.tau)))
    return TrajectoryDataset(covs, A, np.array(Y), support, schema)


def write_csv(ds: TrajectoryDataset, path, comment: str | None = None) -> None:
    """Write the dataset in the wide layout read by :func:`load_csv`.

    Reals are written with ``repr`` so a reload is bit-exact; ``comment``
    becomes a leading ``#`` line.
    """
    sch = ds.schema
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(sch.column_order())
        for i in range(ds.n):
            rec: list[str] = []
            for t in range(ds.tau):
                rec.extend(repr(float(x)) for x in ds.covariates[t][i])
                rec.append(str(int(ds.treatments[i, t])))
            rec.append(repr(float(ds.outcome[i])))
            w.writerow(rec)
