"""Block-tridiagonal linear systems via block Gaussian elimination.

For diagonal blocks A_i, sub-diagonal blocks L_i (block row i+1, column i)
and super-diagonal blocks U_i, the Schur complements are

    S_1 = A_1,    S_{i+1} = A_{i+1} - L_i S_i^{-1} U_i,

so a solve costs O(K b^3) for K blocks of size b and never forms the full
(K b) x (K b) matrix. Each S_i is LU factored with partial pivoting inside
the block only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.linalg import lapack

# reciprocal 1-norm condition estimate below which a pivot block is singular
RCOND_MIN = 1e-14


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, block: int, rcond: float):
        super().__init__(f"pivot block {block} is numerically singular (rcond={rcond:.3e})")
        self.block = block
        self.rcond = rcond


@dataclass
class BTDMatrix:
    """diag: (K, b, b); lower: (K-1, b, b) with lower[i] at block (i+1, i).

    ``upper`` defaults to the transposes of ``lower`` (symmetric case).
    """

    diag: np.ndarray
    lower: np.ndarray
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        K, b, b2 = self.diag.shape
        if b != b2:
            raise ValueError("diagonal blocks must be square")
        self.lower = np.asarray(self.lower, dtype=float).reshape(max(K - 1, 0), b, b)
        if self.upper is None:
            self.upper = np.transpose(self.lower, (0, 2, 1))
        else:
            self.upper = np.asarray(self.upper, dtype=float).reshape(max(K - 1, 0), b, b)

    @property
    def K(self) -> int:
        return self.diag.shape[0]

    @property
    def block_size(self) -> int:
        return self.diag.shape[1]

    def matvec(self, x):
        """A @ x for x of shape (K*b,) or (K*b, r)."""
        K, b = self.K, self.block_size
        X = np.asarray(x, dtype=float).reshape(K, b, -1)
        Y = np.einsum("kij,kjr->kir", self.diag, X)
        if K > 1:
            Y[1:] += np.einsum("kij,kjr->kir", self.lower, X[:-1])
            Y[:-1] += np.einsum("kij,kjr->kir", self.upper, X[1:])
        return Y.reshape(np.shape(x))

    def to_dense(self) -> np.ndarray:
        K, b = self.K, self.block_size
        A = np.zeros((K * b, K * b))
        for i in range(K):
            A[i * b:(i + 1) * b, i * b:(i + 1) * b] = self.diag[i]
            if i + 1 < K:
                A[(i + 1) * b:(i + 2) * b, i * b:(i + 1) * b] = self.lower[i]
                A[i * b:(i + 1) * b, (i + 1) * b:(i + 2) * b] = self.upper[i]
        return A


@dataclass
class BTDFactorization:
    lu: list  # LU factors of the Schur complements S_i
    W: np.ndarray  # W_i = S_i^{-1} U_i, shape (K-1, b, b)
    lower: np.ndarray
    rcond: np.ndarray

    @property
    def K(self) -> int:
        return len(self.lu)


def _lu_block(S, index):
    anorm = np.linalg.norm(S, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(S, check_finite=False)
    if not np.all(np.isfinite(lu)):
        raise SingularBlockError(index, 0.0)
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond >= RCOND_MIN:
        raise SingularBlockError(index, float(rcond))
    return (lu, piv), float(rcond)


def factor(btd: BTDMatrix) -> BTDFactorization:
    K, b = btd.K, btd.block_size
    lus, rconds = [], np.empty(K)
    W = np.empty((max(K - 1, 0), b, b))
    S = btd.diag[0]
    for i in range(K):
        if i > 0:
            S = btd.diag[i] - btd.lower[i - 1] @ W[i - 1]
        fac, rconds[i] = _lu_block(S, i)
        lus.append(fac)
        if i + 1 < K:
            W[i] = la.lu_solve(fac, btd.upper[i], check_finite=False)
    return BTDFactorization(lus, W, btd.lower, rconds)


def solve(fact: BTDFactorization, rhs) -> np.ndarray:
    """Solve with one or several right-hand sides (shape (K*b,) or (K*b, r))."""
    rhs = np.asarray(rhs, dtype=float)
    K = fact.K
    b = fact.lu[0][0].shape[0]
    Y = rhs.reshape(K, b, -1).copy()
    # forward: yhat_i = b_i - L_{i-1} S_{i-1}^{-1} yhat_{i-1}
    Z = np.empty_like(Y)
    for i in range(K):
        if i > 0:
            Y[i] -= fact.lower[i - 1] @ Z[i - 1]
        Z[i] = la.lu_solve(fact.lu[i], Y[i], check_finite=False)
    # backward: x_i = S_i^{-1} yhat_i - W_i x_{i+1}
    X = Z
    for i in range(K - 2, -1, -1):
        X[i] -= fact.W[i] @ X[i + 1]
    return X.reshape(rhs.shape)


def btd_solve(btd: BTDMatrix, rhs) -> np.ndarray:
    return solve(factor(btd), rhs)
