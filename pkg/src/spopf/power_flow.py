"""Newton-Raphson solution of f(x, u) = 0 on the branch selected by a warm start."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .case_model import QuadraticModel

# pivots below this fraction of the largest pivot count as zero
SINGULAR_PIVOT_RTOL = 1e-14
# clamp for exp(log|det J|) so the determinant constraint never overflows
LOGDET_CLAMP = 700.0


@dataclass(frozen=True)
class PowerFlowResult:
    x: np.ndarray
    iterations: int
    residual_inf: float
    converged: bool
    singular: bool = False
    residual_history: tuple = ()


def jacobian(model: QuadraticModel, x) -> np.ndarray:
    """df/dx at x, i.e. J0 + sum_k J_k x_k."""
    return model.jacobian(np.asarray(x, dtype=float))


def _lu(J):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        return la.lu_factor(J, check_finite=False)


def lu_factor_checked(J):
    """LU factors of J, or None if a pivot is numerically zero."""
    lu, piv = _lu(J)
    d = np.abs(np.diag(lu))
    if d.size and (not np.all(np.isfinite(d)) or d.min() <= SINGULAR_PIVOT_RTOL * max(d.max(), 1e-300)):
        return None
    return lu, piv


def det_sign_logabs(J) -> tuple[int, float]:
    """Sign and log-magnitude of det J from a partially pivoted LU.

    The sign is 0 (and the log -inf) when the matrix is numerically singular.
    """
    J = np.asarray(J, dtype=float)
    if J.size == 0:
        return 1, 0.0
    lu, piv = _lu(J)
    d = np.diag(lu)
    ad = np.abs(d)
    if ad.min() <= SINGULAR_PIVOT_RTOL * max(ad.max(), 1e-300):
        return 0, -math.inf
    swaps = np.count_nonzero(piv != np.arange(piv.size))
    sign = (-1) ** swaps * int(np.prod(np.sign(d)))
    return int(sign), float(np.sum(np.log(ad)))


def abs_det_clamped(logabs: float) -> float:
    return math.exp(min(logabs, LOGDET_CLAMP))


def solve_power_flow(model: QuadraticModel, u, x_guess, tol=1e-8, max_iter=20) -> PowerFlowResult:
    """Newton iteration from ``x_guess``; never raises on non-convergence."""
    u = np.asarray(u, dtype=float)
    x = np.array(x_guess, dtype=float)
    history = []
    for it in range(max_iter + 1):
        r = model.f(x, u)
        res = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(res)
        if not math.isfinite(res):
            return PowerFlowResult(x, it, res, False, False, tuple(history))
        if res <= tol:
            return PowerFlowResult(x, it, res, True, False, tuple(history))
        if it == max_iter:
            break
        fac = lu_factor_checked(model.jacobian(x))
        if fac is None:
            return PowerFlowResult(x, it, res, False, True, tuple(history))
        x = x - la.lu_solve(fac, r, check_finite=False)
    return PowerFlowResult(x, max_iter, history[-1], False, False, tuple(history))
