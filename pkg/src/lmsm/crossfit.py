"""Fold partitions for cross-fitted nuisance estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lmsm.errors import ContractError


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """A random partition of ``0..n-1`` into ``J`` validation folds.

    ``assignment[i]`` is the fold ``j(i)`` holding row ``i``; fold sizes
    differ by at most one.
    """

    J: int
    assignment: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def validation_rows(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.J)


def make_folds(n: int, J: int, seed: int = 0) -> FoldAssignment:
    """Shuffled round-robin partition: deterministic given ``(n, J, seed)``."""
    if J < 2 or J > n:
        raise ContractError(f"need 2 <= J <= n, got J={J}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % J
    assignment.setflags(write=False)
    return FoldAssignment(J, assignment, seed)


def training_rows(fa: FoldAssignment, j: int) -> np.ndarray:
    """``T_j``: every row outside validation fold ``j``."""
    if not 0 <= j < fa.J:
        raise ContractError(f"fold {j} outside 0..{fa.J - 1}")
    return np.flatnonzero(fa.assignment != j)
