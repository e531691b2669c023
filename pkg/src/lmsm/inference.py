"""Influence-function covariance and Wald intervals."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from lmsm.errors import InferenceError

Z_975 = 1.959963985


def normal_quantile(level: float) -> float:
    """Two-sided critical value ``z_{(1+level)/2}``."""
    if not 0.0 < level < 1.0:
        raise InferenceError(f"confidence level must be in (0, 1), got {level}")
    if abs(level - 0.95) < 1e-15:
        return Z_975
    return float(ndtri(0.5 + level / 2.0))


def eif_matrix(pseudo, u1_hat, jac) -> np.ndarray:
    """Rows ``S_i = -J^{-1} (D_1(Z_i) - U_1)``, returned as an ``(n, d)`` matrix."""
    D = np.asarray(pseudo, dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    J = np.atleast_2d(np.asarray(jac, dtype=float))
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > 1e14:
        raise InferenceError(f"Jacobian is singular (condition number {cond:.3g})")
    centred = D - np.asarray(u1_hat, dtype=float).reshape(1, -1)
    return -np.linalg.solve(J, centred.T).T


def wald(S, beta, level: float = 0.95):
    """Covariance ``Sigma = S^T S / n`` and intervals ``beta +/- z sqrt(Sigma_kk / n)``."""
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    n = S.shape[0]
    if n < 2:
        raise InferenceError("need at least two rows for a covariance")
    sigma = S.T @ S / n
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.clip(np.diag(sigma), 0.0, None) / n)
    z = normal_quantile(level)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    return sigma, beta - z * se, beta + z * se
