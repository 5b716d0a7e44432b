"""Feasible log-barrier interior-point solver for the discretized path problem.

The solver works on any object that evaluates the same inequality vector at
every interior corner (see :class:`PointConstraints`). One Newton step:

1. assemble Gamma_i = D_i' Sigma_i D_i + Hess(z_i'g)(p_i) + delta_i I;
2. solve the permuted reduced KKT system, which is block tridiagonal with
   blocks of size m+1 (corner coordinates plus one spacing multiplier);
3. recover dz and ds from the eliminated rows;
4. backtrack on the barrier merit function while the spacing Jacobian keeps
   full rank; on failure, retry once with the block diagonal shift delta.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import linalg_btd
from .path import (
    PathDiscretization,
    equality_constraints,
    equality_hessian_term,
    equality_jacobian_dense,
    objective,
    rank_margins,
    tridiag_kron,
)

log = logging.getLogger(__name__)


class InfeasibleStartError(ValueError):
    """The starting path is not strictly feasible."""


class PointConstraints(Protocol):
    """Inequalities g(p_i) < 0 evaluated independently at each corner.

    ``evaluate`` returns the (K, n_ineq) values plus an opaque state that
    ``derivatives`` may reuse and ``accept`` commits (e.g. warm starts).
    It raises an exception when the values cannot be computed.
    """

    n_ineq: int

    def evaluate(self, P): ...

    def derivatives(self, P, Z, state): ...

    def accept(self, state) -> None: ...


class ExplicitConstraints:
    """Point constraints given by plain callables of a single corner.

    ``fun(u) -> (nI,)``, ``jac(u) -> (nI, m)``, ``hess(u, z) -> (m, m)``.
    ``hess`` may be omitted for affine constraints.
    """

    def __init__(self, fun, jac, hess=None, n_ineq=None, m=None):
        self.fun, self.jac, self.hess = fun, jac, hess
        self.n_ineq = n_ineq
        self.m = m

    def evaluate(self, P):
        G = np.array([np.atleast_1d(self.fun(p)) for p in P], dtype=float)
        return G.reshape(len(P), -1), None

    def derivatives(self, P, Z, state):
        G, _ = self.evaluate(P)
        dG = np.array([np.atleast_2d(self.jac(p)) for p in P], dtype=float)
        m = P.shape[1]
        if self.hess is None:
            H = np.zeros((len(P), m, m))
        else:
            H = np.array([self.hess(p, z) for p, z in zip(P, Z)], dtype=float)
        return G, dG.reshape(len(P), -1, m), H

    def accept(self, state):
        pass


@dataclass(frozen=True)
class IPMParams:
    tau: float = 0.99
    gamma: float = 0.5
    eta: float = 1e-4
    eps_ls: float = 1e-6
    rho_max: float = 100.0
    eps_tol: float = 1e-3
    iter_max: int = 100
    debug_check: bool = False

    def __post_init__(self):
        for name in ("tau", "gamma", "eta", "eps_ls"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.rho_max <= 0 or self.eps_tol <= 0 or self.iter_max < 0:
            raise ValueError("rho_max and eps_tol must be positive, iter_max nonnegative")


@dataclass
class BarrierIterate:
    P: np.ndarray  # (K, m)
    s: np.ndarray  # (K, nI)
    y: np.ndarray  # (K,)
    z: np.ndarray  # (K, nI)
    mu: float


@dataclass
class KKTPieces:
    """Everything the Newton step needs at one iterate."""

    disc: PathDiscretization
    w: np.ndarray
    d: np.ndarray
    grad_phi: np.ndarray  # (K, m)
    cE: np.ndarray
    DE: tuple  # bands (left, diag, right)
    G: np.ndarray  # (K, nI)
    dG: np.ndarray  # (K, nI, m)
    H: np.ndarray  # (K, m, m) Hessian of z_i'g at p_i
    grad_L: np.ndarray  # (K, m)


@dataclass
class NewtonStep:
    dp: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    ds: np.ndarray


@dataclass
class BarrierResult:
    P: np.ndarray
    s: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str  # converged | max_iter | failed_after_correction
    iterations: int
    E_mu: float
    trace: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "converged"


# -- pieces -------------------------------------------------------------------


def _disc(t, u0, u1, P):
    return PathDiscretization(t, u0, u1, P)


def kkt_pieces(disc: PathDiscretization, it: BarrierIterate, G, dG, H) -> KKTPieces:
    _, grad_phi = objective(disc)
    cE, (left, diag, right) = equality_constraints(disc)
    y = it.y
    # D_E' y: block i collects diag[i] y_i + right[i-1] y_{i-1} + left[i+1] y_{i+1}
    DEty = diag * y[:, None]
    DEty[1:] += right[:-1] * y[:-1, None]
    DEty[:-1] += left[1:] * y[1:, None]
    grad_L = grad_phi + DEty + np.einsum("kjm,kj->km", dG, it.z)
    return KKTPieces(disc, disc.w, disc.d, grad_phi, cE, (left, diag, right), G, dG, H, grad_L)


def error_metric(it: BarrierIterate, kp: KKTPieces, rho_max=100.0) -> float:
    K, nI = it.s.shape
    nz = K * nI
    rho_d = max(rho_max, (np.abs(it.y).sum() + np.abs(it.z).sum()) / (K + nz)) / rho_max
    terms = [np.max(np.abs(kp.grad_L)) / rho_d, np.max(np.abs(kp.cE))]
    if nz:
        rho_c = max(rho_max, np.abs(it.z).sum() / nz) / rho_max
        terms.append(np.max(np.abs(it.s * it.z - it.mu)) / rho_c)
    return float(max(terms))


def inertia_correction(w, y, H) -> np.ndarray:
    """Shifts delta_i = l_E + ||H_i||_F making the Hessian of L - phi PSD."""
    w = np.asarray(w, dtype=float)
    K = len(y)
    ye = np.concatenate([[0.0], y, [0.0]])
    lam = min(0.0, float(np.min(w * np.diff(ye))))
    l_E = -4.0 * (1.0 + math.cos(math.pi / (K + 1))) * lam
    return l_E + np.linalg.norm(H, axis=(1, 2))


def equality_curvature_bound(w, y) -> float:
    """l_E: minus a lower bound on the smallest eigenvalue of Hess(y'c_E)."""
    return float(inertia_correction(w, y, np.zeros((len(y), 1, 1)))[0])


def fraction_to_boundary(z, dz, tau) -> float:
    z = np.asarray(z, dtype=float).ravel()
    dz = np.asarray(dz, dtype=float).ravel()
    neg = dz < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * z[neg] / dz[neg])))


def _phi_blocks(kp: KKTPieces, y):
    """Phi_k = 2 w_k [[(1 + y_k - y_{k-1}) I, d_k], [d_k', 0]], k = 1..K+1."""
    Kp1, m = kp.d.shape
    ye = np.concatenate([[0.0], y, [0.0]])
    Phi = np.zeros((Kp1, m + 1, m + 1))
    idx = np.arange(m)
    Phi[:, idx, idx] = (1.0 + np.diff(ye))[:, None]
    Phi[:, :m, m] = kp.d
    Phi[:, m, :m] = kp.d
    return 2.0 * kp.w[:, None, None] * Phi


def assemble_reduced_kkt(it: BarrierIterate, kp: KKTPieces, delta=None):
    """Permuted reduced Newton system as a BTDMatrix plus its right-hand side."""
    K, m = it.P.shape
    Sigma = it.z / it.s
    Gamma = np.einsum("kjm,kj,kjn->kmn", kp.dG, Sigma, kp.dG) + kp.H
    if delta is not None:
        Gamma = Gamma + np.asarray(delta)[:, None, None] * np.eye(m)
    Phi = _phi_blocks(kp, it.y)
    diag = Phi[:-1] + Phi[1:]
    diag[:, :m, :m] += Gamma
    lower = -Phi[1:-1]
    r_p = kp.grad_L + np.einsum("kjm,kj->km", kp.dG, Sigma * kp.G + it.mu / it.s)
    rhs = -np.concatenate([r_p, kp.cE[:, None]], axis=1).ravel()
    return linalg_btd.BTDMatrix(diag, lower), rhs


def newton_step(it: BarrierIterate, kp: KKTPieces, btd, rhs) -> NewtonStep:
    K, m = it.P.shape
    sol = linalg_btd.btd_solve(btd, rhs).reshape(K, m + 1)
    dp, dy = sol[:, :m], sol[:, m]
    Sigma = it.z / it.s
    dz = Sigma * (np.einsum("kjm,km->kj", kp.dG, dp) + kp.G + it.mu / it.z)
    ds = (it.mu / it.s - it.z - dz) / Sigma
    return NewtonStep(dp, dy, dz, ds)


def full_system(it: BarrierIterate, kp: KKTPieces, delta=None):
    """Dense unreduced Newton matrix and right-hand side (small problems only).

    Unknown ordering is (dp, ds, dy, dz) with dp and ds/dz grouped by corner.
    """
    K, m = it.P.shape
    nI = it.s.shape[1]
    n_p, n_s = K * m, K * nI
    hd, ho = equality_hessian_term(kp.w, it.y)
    w = kp.w
    HL = tridiag_kron(2 * (w[:-1] + w[1:]) + hd, -2 * w[1:-1] + ho, m)
    for i in range(K):
        sl = slice(i * m, (i + 1) * m)
        HL[sl, sl] += kp.H[i]
        if delta is not None:
            HL[sl, sl] += delta[i] * np.eye(m)
    DI = np.zeros((n_s, n_p))
    for i in range(K):
        DI[i * nI:(i + 1) * nI, i * m:(i + 1) * m] = kp.dG[i]
    DE = equality_jacobian_dense(kp.disc)
    n = n_p + n_s + K + n_s
    A = np.zeros((n, n))
    o_s, o_y, o_z = n_p, n_p + n_s, n_p + n_s + K
    A[:n_p, :n_p] = HL
    A[:n_p, o_y:o_z] = DE.T
    A[:n_p, o_z:] = DI.T
    A[o_s:o_y, o_s:o_y] = np.diag((it.z / it.s).ravel())
    A[o_s:o_y, o_z:] = np.eye(n_s)
    A[o_y:o_z, :n_p] = DE
    A[o_z:, :n_p] = DI
    A[o_z:, o_s:o_y] = np.eye(n_s)
    rhs = -np.concatenate([
        kp.grad_L.ravel(),
        (it.z - it.mu / it.s).ravel(),
        kp.cE,
        (kp.G + it.s).ravel(),
    ])
    return A, rhs


def full_system_residual(it, kp, step: NewtonStep, delta=None) -> float:
    """Relative residual of the recovered step in the unreduced system."""
    A, rhs = full_system(it, kp, delta)
    x = np.concatenate([step.dp.ravel(), step.ds.ravel(), step.dy, step.dz.ravel()])
    r = A @ x - rhs
    return float(np.max(np.abs(r)) / max(1.0, np.max(np.abs(rhs))))


def merit(phi_value, G, mu) -> float:
    """phi - mu sum ln(-g), +inf when some g >= 0."""
    if G is None or not np.all(np.isfinite(G)) or np.any(G >= 0):
        return math.inf
    return float(phi_value - mu * np.sum(np.log(-G)))


# -- main loop ------------------------------------------------------------------


class _Evaluator:
    def __init__(self, t, u0, u1, cons):
        self.t, self.u0, self.u1, self.cons = t, u0, u1, cons

    def disc(self, P):
        return _disc(self.t, self.u0, self.u1, P)

    def try_eval(self, P):
        try:
            G, state = self.cons.evaluate(P)
        except Exception as exc:  # power flow failure and friends: infeasible trial
            log.debug("trial evaluation failed: %s", exc)
            return None, None
        return np.asarray(G, dtype=float), state


def line_search(ev: _Evaluator, it: BarrierIterate, psi0, dpsi, dp, params: IPMParams):
    """Backtracking on the merit function plus the rank safeguards.

    Returns (M, accepted, trial) where trial = (P, G, state, psi) if accepted.
    """
    M = 0
    while True:
        a = params.gamma ** M
        if a <= params.eps_ls:
            return M, False, None
        P_new = it.P + a * dp
        disc = ev.disc(P_new)
        if rank_margins(disc, eps_ls=params.eps_ls).passed:
            G, state = ev.try_eval(P_new)
            psi = merit(objective(disc)[0], G, it.mu)
            if psi <= psi0 + params.eta * a * dpsi:
                return M, True, (P_new, G, state, psi)
        M += 1


def barrier_solve(t, u0, u1, cons: PointConstraints, P0, mu, params: IPMParams = IPMParams(),
                  trace_stream=None) -> BarrierResult:
    """Solve the barrier problem for fixed mu from the strictly feasible path P0."""
    t = np.asarray(t, dtype=float)
    ev = _Evaluator(t, np.asarray(u0, float), np.asarray(u1, float), cons)
    P = np.array(P0, dtype=float)
    disc = ev.disc(P)
    marg = rank_margins(disc, eps_ls=params.eps_ls)
    if not marg.passed:
        raise InfeasibleStartError(f"starting path fails the rank safeguard ({marg.reason})")
    G, state = ev.try_eval(P)
    if G is None:
        raise InfeasibleStartError("constraints cannot be evaluated on the starting path")
    if np.any(G >= 0):
        raise InfeasibleStartError(f"starting path violates constraints (max g = {G.max():.3e})")
    cons.accept(state)
    K, nI = G.shape
    it = BarrierIterate(P, -G, np.zeros(K), mu / (-G), mu)
    psi = merit(objective(disc)[0], G, mu)
    trace = []
    n_iter = 0
    while True:
        G, dG, H = cons.derivatives(it.P, it.z, state)
        kp = kkt_pieces(ev.disc(it.P), it, np.asarray(G), np.asarray(dG), np.asarray(H))
        E = error_metric(it, kp, params.rho_max)
        if E <= params.eps_tol:
            status = "converged"
            break
        if n_iter >= params.iter_max:
            status = "max_iter"
            break
        n_iter += 1
        grad_psi = kp.grad_phi + it.mu * np.einsum("kjm,kj->km", kp.dG, 1.0 / it.s)
        corrected = False
        delta = None
        while True:
            btd, rhs = assemble_reduced_kkt(it, kp, delta)
            try:
                step = newton_step(it, kp, btd, rhs)
                ok_step = bool(np.all(np.isfinite(step.dp)))
            except linalg_btd.SingularBlockError as exc:
                log.debug("reduced system singular: %s", exc)
                ok_step = False
            if ok_step:
                dpsi = float(np.sum(grad_psi * step.dp))
                M, accepted, trial = line_search(ev, it, psi, dpsi, step.dp, params)
            else:
                M, accepted, trial = None, False, None
            if accepted or corrected:
                break
            delta = inertia_correction(kp.w, it.y, kp.H)
            corrected = True
        if not accepted:
            status = "failed_after_correction"
            trace.append(_trace_row(trace_stream, n_iter, E, psi, M, None, corrected))
            break
        extra = {}
        if params.debug_check:
            extra["kkt_residual"] = full_system_residual(it, kp, step, delta)
        a = params.gamma ** M
        az = fraction_to_boundary(it.z, step.dz, params.tau)
        P_new, G_new, state, psi = trial
        cons.accept(state)
        it = BarrierIterate(P_new, -G_new, it.y + a * az * step.dy, it.z + a * az * step.dz, mu)
        trace.append(_trace_row(trace_stream, n_iter, E, psi, M, az, corrected, **extra))
    return BarrierResult(it.P, it.s, it.y, it.z, status, n_iter, E, trace)


def _trace_row(stream, n, E, psi, M, az, corrected, **extra):
    row = {"iter": n, "E_mu": E, "merit": psi, "M": M, "alpha_z": az, "corrected": corrected}
    row.update(extra)
    if stream is not None:
        stream.write(json.dumps(row) + "\n")
    return row


__all__ = [
    "IPMParams",
    "BarrierIterate",
    "BarrierResult",
    "ExplicitConstraints",
    "InfeasibleStartError",
    "KKTPieces",
    "NewtonStep",
    "assemble_reduced_kkt",
    "barrier_solve",
    "error_metric",
    "fraction_to_boundary",
    "full_system",
    "full_system_residual",
    "inertia_correction",
    "kkt_pieces",
    "line_search",
    "merit",
    "newton_step",
    "equality_curvature_bound",
]
