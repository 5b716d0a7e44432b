"""Discretized paths: corner points, length objective, spacing equalities.

A path with K interior corners p_1..p_K joins fixed endpoints p_0 = u0 and
p_{K+1} = u1. Corner i sits at parameter t_i, and w_k = (t_k - t_{k-1})^-2 / (K+1)
weights segment k so that the straight line at its own spacing has
objective ||u1 - u0||^2.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PathDiscretization:
    t: np.ndarray  # K+2 parameters, t[0] = 0, t[-1] = 1
    u0: np.ndarray
    u1: np.ndarray
    p: np.ndarray  # (K, m) interior corners

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 3 or t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("t must run from 0 to 1 with at least one interior point")
        if np.any(np.diff(t) <= 0):
            raise ValueError("t must be strictly increasing")
        p = np.asarray(self.p, dtype=float)
        if p.shape != (t.size - 2, np.size(self.u0)):
            raise ValueError(f"p has shape {p.shape}, expected {(t.size - 2, np.size(self.u0))}")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "u0", np.array(self.u0, dtype=float))
        object.__setattr__(self, "u1", np.array(self.u1, dtype=float))

    @property
    def K(self) -> int:
        return self.t.size - 2

    @property
    def m(self) -> int:
        return self.u0.size

    @property
    def w(self) -> np.ndarray:
        return path_weights(self.t)

    @property
    def corners(self) -> np.ndarray:
        """All K+2 corners including the endpoints."""
        return np.vstack([self.u0, self.p, self.u1])

    @property
    def d(self) -> np.ndarray:
        """Segment vectors d_k = p_k - p_{k-1}, k = 1..K+1."""
        return np.diff(self.corners, axis=0)

    def flat(self) -> np.ndarray:
        return self.p.reshape(-1).copy()

    def with_points(self, p) -> "PathDiscretization":
        return PathDiscretization(self.t, self.u0, self.u1, np.reshape(p, (self.K, self.m)))


def uniform_spacing(K: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, K + 2)


def path_weights(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.diff(t) ** -2 / (t.size - 1)


def init_line_path(u0, u1, t) -> PathDiscretization:
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    if u0.shape != u1.shape:
        raise ValueError("endpoints have different sizes")
    if np.array_equal(u0, u1):
        raise ValueError("endpoints coincide")
    t = np.asarray(t, dtype=float)
    p = u0 + t[1:-1, None] * (u1 - u0)
    return PathDiscretization(t, u0, u1, p)


def objective(disc: PathDiscretization):
    """phi = sum_k w_k ||d_k||^2 and its gradient, shaped (K, m)."""
    w, d = disc.w, disc.d
    wd = w[:, None] * d
    return float(np.sum(wd * d)), 2 * wd[:-1] - 2 * wd[1:]


def equality_constraints(disc: PathDiscretization):
    """c_i = w_i||d_i||^2 - w_{i+1}||d_{i+1}||^2 and the three bands of D_E.

    The Jacobian is returned as (left, diag, right) arrays of shape (K, m):
    row i has dc_i/dp_{i-1} = left[i], dc_i/dp_i = diag[i],
    dc_i/dp_{i+1} = right[i]. left[0] and right[-1] touch the fixed endpoints
    and are not part of the Jacobian; they are set to zero.
    """
    w, d = disc.w, disc.d
    e = w * np.sum(d * d, axis=1)
    c = e[:-1] - e[1:]
    wd2 = 2 * w[:, None] * d
    left = -wd2[:-1].copy()
    diag = wd2[:-1] + wd2[1:]
    right = -wd2[1:].copy()
    left[0] = 0.0
    right[-1] = 0.0
    return c, (left, diag, right)


def equality_jacobian_dense(disc: PathDiscretization) -> np.ndarray:
    """D_E as a dense K x (K m) matrix (small problems and tests only)."""
    K, m = disc.K, disc.m
    _, (left, diag, right) = equality_constraints(disc)
    D = np.zeros((K, K * m))
    for i in range(K):
        D[i, i * m:(i + 1) * m] = diag[i]
        if i > 0:
            D[i, (i - 1) * m:i * m] = left[i]
        if i < K - 1:
            D[i, (i + 1) * m:(i + 2) * m] = right[i]
    return D


def objective_hessian(w) -> np.ndarray:
    """Y with Hessian of phi equal to 2 Y kron I; raises if Y is not PD."""
    w = np.asarray(w, dtype=float)
    Y = np.diag(w[:-1] + w[1:]) - np.diag(w[1:-1], 1) - np.diag(w[1:-1], -1)
    try:
        np.linalg.cholesky(Y)
    except np.linalg.LinAlgError as exc:
        raise ValueError("objective Hessian is not positive definite") from exc
    return Y


def equality_hessian_term(w, y):
    """Scalars (diag, off) with Hessian of y'c_E = tridiag(off, diag, off) kron I.

    diag[i] multiplies I in block (i, i); off[i] multiplies I in blocks
    (i, i+1) and (i+1, i). Uses y_0 = y_{K+1} = 0.
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    ye = np.concatenate([[0.0], y, [0.0]])
    a = 2 * w * np.diff(ye)  # a_k = 2 w_k (y_k - y_{k-1}), k = 1..K+1
    return a[:-1] + a[1:], -a[1:-1]


def tridiag_kron(diag, off, m) -> np.ndarray:
    """Dense tridiag(off, diag, off) kron I_m."""
    T = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    return np.kron(T, np.eye(m))


@dataclass(frozen=True)
class Margins:
    ratio_b: float
    ratio_q: float
    passed: bool
    reason: str = ""


def rank_margins(disc_or_d, w=None, eps_ls=1e-6) -> Margins:
    """Rank-safeguard ratios of the spacing Jacobian.

    ratio_b compares the smallest and largest weighted segment; ratio_q
    measures how far the sum of the reciprocal segments is from cancelling.
    Accepts a PathDiscretization or raw segment vectors plus weights.
    """
    if isinstance(disc_or_d, PathDiscretization):
        d, w = disc_or_d.d, disc_or_d.w
    else:
        d = np.asarray(disc_or_d, dtype=float)
        w = np.asarray(w, dtype=float)
    b = w[:, None] * d
    bn = np.max(np.abs(b), axis=1)
    if np.any(bn == 0.0):
        return Margins(0.0, 0.0, False, "zero segment")
    q = b / np.sum(b * b, axis=1)[:, None]
    ratio_b = float(bn.min() / bn.max())
    ratio_q = float(np.max(np.abs(q.sum(axis=0))) / q.shape[0] / np.max(np.abs(q)))
    ok = ratio_b > eps_ls and ratio_q > eps_ls
    reason = "" if ok else ("segment ratio" if ratio_b <= eps_ls else "reciprocal sum")
    return Margins(ratio_b, ratio_q, ok, reason)


# -- CSV ----------------------------------------------------------------------


def path_to_csv(disc: PathDiscretization, labels=None) -> str:
    labels = list(labels) if labels is not None else [f"u{j}" for j in range(disc.m)]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k", "t"] + labels)
    for k, (tk, row) in enumerate(zip(disc.t, disc.corners)):
        wr.writerow([k, f"{tk:.17g}"] + [f"{v:.17g}" for v in row])
    return buf.getvalue()


def path_from_csv(text: str) -> tuple[PathDiscretization, list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[:2] != ["k", "t"]:
        raise ValueError("path CSV must start with columns k, t")
    data = np.array([[float(v) for v in r[1:]] for r in body])
    t, pts = data[:, 0], data[:, 1:]
    return PathDiscretization(t, pts[0], pts[-1], pts[1:-1]), header[2:]
