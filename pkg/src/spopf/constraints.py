"""OPF inequality constraints g(u) <= 0 and their derivatives in the controls.

Constraints come in three groups, stored in this order:

* control constraints (affine in u): active power limits of PV units and
  voltage limits of generator buses, written in squared-voltage form;
* state constraints h(x(u)): PQ-bus voltage limits, slack active power and
  generator reactive power limits, apparent-power flow limits at both branch
  ends, angle-difference limits;
* optionally the power-flow solvability constraint -|det J(x(u))|.

State-dependent derivatives go through the implicit map x(u) defined by
f(x, u) = 0, using a single LU factorization of J(x) per point.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .case_model import (
    PQ,
    SLACK,
    FormBank,
    QuadForm,
    QuadraticModel,
    _sym,
    branch_admittances,
    complex_power_forms,
    voltage_square_form,
)
from .power_flow import (
    LOGDET_CLAMP,
    det_sign_logabs,
    lu_factor_checked,
    solve_power_flow,
)

CONTROL, STATE, DET = "U", "X", "P"


class EvaluationError(RuntimeError):
    """Constraints could not be evaluated (power flow failed or J singular)."""


@dataclass(frozen=True)
class ConstraintInfo:
    group: str  # CONTROL, STATE or DET
    kind: str
    label: str
    bound: float


@dataclass
class DerivativeBundle:
    g: np.ndarray
    dg_du: np.ndarray
    dx_du: np.ndarray
    x: np.ndarray
    lag_hess: np.ndarray | None = None
    # cached intermediates for the Hessian
    lu: tuple | None = field(default=None, repr=False)
    form_vals: np.ndarray | None = field(default=None, repr=False)
    form_grads: np.ndarray | None = field(default=None, repr=False)
    det_t: np.ndarray | None = field(default=None, repr=False)
    det_T2: np.ndarray | None = field(default=None, repr=False)


def state_sensitivity(model, x, controls=None, lu=None):
    """dx/du' = -(df/dx')^{-1} df/du' restricted to ``controls`` columns."""
    if lu is None:
        lu = lu_factor_checked(model.jacobian(x))
        if lu is None:
            raise EvaluationError("singular power-flow Jacobian")
    S = model.control_selector()
    if controls is not None:
        S = S[:, controls]
    return la.lu_solve(lu, S, check_finite=False)


def state_sensitivity_second(model, x, dx_du, m, lu=None):
    """d^2 x / (d u_m du') = -J^{-1} [sum_k J_k (dx/du')_{km}] dx/du'."""
    if lu is None:
        lu = lu_factor_checked(model.jacobian(x))
        if lu is None:
            raise EvaluationError("singular power-flow Jacobian")
    M = model.jacobian_linear_part(dx_du[:, m])
    return -la.lu_solve(lu, M @ dx_du, check_finite=False)


class ConstraintSet:
    """Inequalities of one operating point as functions of the free controls.

    ``free`` lists indices into the model's full control vector that are
    optimized; the rest stay at ``u_fixed``.
    """

    def __init__(self, model: QuadraticModel, free, u_fixed=None, flow_limits=True,
                 angle_limits=True, det_constraint=False, pf_tol=1e-8, pf_max_iter=20):
        self.model = model
        self.free = np.asarray(free, dtype=int)
        self.u_fixed = (model.default_controls() if u_fixed is None
                        else np.asarray(u_fixed, dtype=float).copy())
        self.det_constraint = det_constraint
        self.pf_tol = pf_tol
        self.pf_max_iter = pf_max_iter
        case = model.case
        n = case.n
        idx = case.bus_index
        info: list[ConstraintInfo] = []

        # control constraints: g = a'u_free + c
        rows, consts = [], []
        free_pos = {int(k): j for j, k in enumerate(self.free)}
        for k, (kind, bus) in enumerate(model.control_labels):
            if kind == "P":
                gen = case.generator_at(bus)
                lo, hi, name = gen.Pmin, gen.Pmax, f"P{bus}"
            else:
                b = case.buses[idx[bus]]
                lo, hi, name = b.Vmin ** 2, b.Vmax ** 2, f"V{bus}^2"
            if k not in free_pos:
                val = self.u_fixed[k]
                if not lo <= val <= hi:
                    raise ValueError(f"fixed control {name}={val:g} violates [{lo:g}, {hi:g}]")
                continue
            for sgn, bound, tag in ((1.0, hi, "max"), (-1.0, lo, "min")):
                if math.isinf(bound):
                    continue
                a = np.zeros(len(self.free))
                a[free_pos[k]] = sgn
                rows.append(a)
                consts.append(-sgn * bound)
                info.append(ConstraintInfo(CONTROL, f"{kind.lower()}{tag}", f"{name} {tag}", bound))
        self.A_u = np.array(rows).reshape(len(rows), len(self.free))
        self.c_u = np.array(consts, dtype=float)

        # state constraints over a bank of quadratic forms
        forms = []
        lin_pos, lin_form = [], []
        sq_pos, sq_a, sq_b, sq_const = [], [], [], []
        pos = len(info)

        def add_lin(q, kind, label, bound):
            nonlocal pos
            lin_pos.append(pos)
            lin_form.append(len(forms))
            forms.append(q)
            info.append(ConstraintInfo(STATE, kind, label, bound))
            pos += 1

        for i, b in enumerate(case.buses):
            if b.kind != PQ:
                continue
            v2 = voltage_square_form(n, i)
            if math.isfinite(b.Vmax):
                add_lin(v2.shifted(-b.Vmax ** 2), "vmax", f"V{b.id} max", b.Vmax)
            if math.isfinite(b.Vmin):
                add_lin(v2.scaled(-1.0).shifted(b.Vmin ** 2), "vmin", f"V{b.id} min", b.Vmin)
        for gen in case.generators:
            i = idx[gen.bus]
            b = case.buses[i]
            if b.kind == SLACK:
                pg = model.p_inj[i].shifted(b.Pd)
                if math.isfinite(gen.Pmax):
                    add_lin(pg.shifted(-gen.Pmax), "pmax", f"P{gen.bus} max", gen.Pmax)
                if math.isfinite(gen.Pmin):
                    add_lin(pg.scaled(-1.0).shifted(gen.Pmin), "pmin", f"P{gen.bus} min", gen.Pmin)
            qg = model.q_inj[i].shifted(b.Qd)
            if math.isfinite(gen.Qmax):
                add_lin(qg.shifted(-gen.Qmax), "qmax", f"Q{gen.bus} max", gen.Qmax)
            if math.isfinite(gen.Qmin):
                add_lin(qg.scaled(-1.0).shifted(gen.Qmin), "qmin", f"Q{gen.bus} min", gen.Qmin)
        for br in case.branches:
            f, t = idx[br.f], idx[br.t]
            if flow_limits and math.isfinite(br.rate):
                yff, yft, ytf, ytt = branch_admittances(br)
                for end, terms, tag in ((f, [(f, yff), (t, yft)], "from"),
                                        (t, [(f, ytf), (t, ytt)], "to")):
                    P, Q = complex_power_forms(n, end, terms)
                    sq_pos.append(pos)
                    sq_a.append(len(forms))
                    sq_b.append(len(forms) + 1)
                    sq_const.append(br.rate ** 2)
                    forms += [P, Q]
                    info.append(ConstraintInfo(STATE, "flow", f"S{br.f}-{br.t} {tag}", br.rate))
                    pos += 1
            if angle_limits and (br.angmin is not None or br.angmax is not None):
                re_q, im_q = _cross_forms(n, f, t)
                if br.angmax is not None:
                    tn = math.tan(br.angmax)
                    add_lin(_combine(im_q, re_q, -tn), "angmax", f"ang{br.f}-{br.t} max", br.angmax)
                if br.angmin is not None:
                    tn = math.tan(br.angmin)
                    add_lin(_combine(re_q.scaled(tn), im_q, -1.0), "angmin",
                            f"ang{br.f}-{br.t} min", br.angmin)
        self.n_control = len(self.c_u)
        self.bank = FormBank(forms, model.dim)
        self.lin_pos = np.array(lin_pos, dtype=int)
        self.lin_form = np.array(lin_form, dtype=int)
        self.sq_pos = np.array(sq_pos, dtype=int)
        self.sq_a = np.array(sq_a, dtype=int)
        self.sq_b = np.array(sq_b, dtype=int)
        self.sq_const = np.array(sq_const, dtype=float)
        self.n_state = pos - self.n_control
        if det_constraint:
            info.append(ConstraintInfo(DET, "det", "-|det J|", 0.0))
        self.info = tuple(info)
        self.groups = np.array([c.group for c in info])

    # -- sizes -------------------------------------------------------------
    @property
    def n_ineq(self) -> int:
        return len(self.info)

    @property
    def m(self) -> int:
        return len(self.free)

    def full_controls(self, u_free):
        u = self.u_fixed.copy()
        u[self.free] = u_free
        return u

    # -- evaluation --------------------------------------------------------
    def solve_state(self, u_free, warm_x):
        res = solve_power_flow(self.model, self.full_controls(u_free), warm_x,
                               tol=self.pf_tol, max_iter=self.pf_max_iter)
        if not res.converged:
            raise EvaluationError(
                "power flow singular" if res.singular else
                f"power flow did not converge (residual {res.residual_inf:.3e})")
        return res.x

    def _state_values(self, x):
        vals, grads = self.bank.values_and_grads(x)
        h = np.empty(self.n_state)
        off = self.n_control
        h[self.lin_pos - off] = vals[self.lin_form]
        h[self.sq_pos - off] = vals[self.sq_a] ** 2 + vals[self.sq_b] ** 2 - self.sq_const
        return h, vals, grads

    def _state_grads(self, vals, grads):
        dh = np.empty((self.n_state, self.model.dim))
        off = self.n_control
        dh[self.lin_pos - off] = grads[self.lin_form]
        dh[self.sq_pos - off] = (2 * vals[self.sq_a, None] * grads[self.sq_a]
                                 + 2 * vals[self.sq_b, None] * grads[self.sq_b])
        return dh

    def values(self, u_free, warm_x):
        """(g, x) at u_free; raises EvaluationError if x(u) is unavailable."""
        u_free = np.asarray(u_free, dtype=float)
        x = self.solve_state(u_free, warm_x)
        parts = [self.A_u @ u_free + self.c_u, self._state_values(x)[0]]
        if self.det_constraint:
            sign, logabs = det_sign_logabs(self.model.jacobian(x))
            if sign == 0:
                raise EvaluationError("singular power-flow Jacobian")
            parts.append([-math.exp(min(logabs, LOGDET_CLAMP))])
        return np.concatenate(parts), x

    def bundle(self, u_free, warm_x, z=None) -> DerivativeBundle:
        """Values and first derivatives; Lagrangian Hessian too when ``z`` is given."""
        u_free = np.asarray(u_free, dtype=float)
        x = self.solve_state(u_free, warm_x)
        J = self.model.jacobian(x)
        lu = lu_factor_checked(J)
        if lu is None:
            raise EvaluationError("singular power-flow Jacobian")
        dx_du = state_sensitivity(self.model, x, self.free, lu=lu)
        h, vals, grads = self._state_values(x)
        g = [self.A_u @ u_free + self.c_u, h]
        b = DerivativeBundle(g=None, dg_du=None, dx_du=dx_du, x=x, lu=lu,
                             form_vals=vals, form_grads=grads)
        dh_dx = self._state_grads(vals, grads)
        rows = [self.A_u, dh_dx @ dx_du]
        if self.det_constraint:
            gdet, t, T2 = _det_terms(self.model, J, lu)
            b.det_t, b.det_T2 = t, T2
            g.append([gdet])
            rows.append((gdet * t)[None, :] @ dx_du)
        b.g = np.concatenate(g)
        b.dg_du = np.vstack(rows)
        if z is not None:
            b.lag_hess = self.lagrangian_hessian(z, b)
        return b

    def state_hessian_terms(self, z, b: DerivativeBundle):
        """Gradient and Hessian in x of sum_j z_j h_j over state/det constraints."""
        z = np.asarray(z, dtype=float)
        off = self.n_control
        zs = z[off:off + self.n_state]
        vals, grads = b.form_vals, b.form_grads
        w = np.zeros(self.bank.size)
        np.add.at(w, self.lin_form, zs[self.lin_pos - off])
        zq = zs[self.sq_pos - off]
        np.add.at(w, self.sq_a, 2 * zq * vals[self.sq_a])
        np.add.at(w, self.sq_b, 2 * zq * vals[self.sq_b])
        Hx = self.bank.weighted_hessian(w) if self.bank.size else np.zeros((self.model.dim,) * 2)
        Ga, Gb = grads[self.sq_a], grads[self.sq_b]
        Hx += 2 * (Ga.T * zq) @ Ga + 2 * (Gb.T * zq) @ Gb
        gx = self._state_grads(vals, grads).T @ zs
        if self.det_constraint:
            zd = z[-1]
            gdet = b.g[-1]
            gx = gx + zd * gdet * b.det_t
            Hx = Hx + zd * gdet * (np.outer(b.det_t, b.det_t) - b.det_T2)
        return gx, Hx

    def lagrangian_hessian(self, z, b: DerivativeBundle):
        """Hessian in the free controls of z'g(u) at the bundle's point.

        Control constraints are affine and contribute nothing. For the rest:
        theta1 = grad_x' J^{-1}; the stacked rows theta1 J_k equal
        sum_l theta1_l H_l; Theta3 = Hess_x - that; result dx_du' Theta3 dx_du.
        """
        gx, Hx = self.state_hessian_terms(z, b)
        theta1 = la.lu_solve(b.lu, gx, trans=1, check_finite=False)
        theta2 = self.model.equations.weighted_hessian(theta1)
        Theta3 = Hx - theta2
        out = b.dx_du.T @ Theta3 @ b.dx_du
        return 0.5 * (out + out.T)


def _cross_forms(n, f, t):
    """Forms of Re and Im of V_f conj(V_t)."""
    N = 2 * n
    # Re = e_f e_t + f_f f_t ; Im = f_f e_t - e_f f_t
    re = QuadForm(_sym(N, [(f, t, 1.0), (n + f, n + t, 1.0)]), np.zeros(N))
    im = QuadForm(_sym(N, [(n + f, t, 1.0), (f, n + t, -1.0)]), np.zeros(N))
    return re, im


def _combine(q1, q2, s2):
    return QuadForm((q1.A + s2 * q2.A).tocsr(), q1.b + s2 * q2.b, q1.c + s2 * q2.c)


def _det_terms(model, J, lu):
    """-|det J|, tr(J^{-1} J_k) for all k, and tr(J^{-1}J_m J^{-1}J_k)."""
    N = model.dim
    sign, logabs = det_sign_logabs(J)
    if sign == 0:
        raise EvaluationError("singular power-flow Jacobian")
    gdet = -math.exp(min(logabs, LOGDET_CLAMP))
    Jinv = la.lu_solve(lu, np.eye(N), check_finite=False)
    T = model.equations.A_flat.toarray().reshape(N, N, N)  # T[l, k, c] = (H_l)_{k,c}
    A = np.einsum("al,lkc->kac", Jinv, T)  # A[k] = J^{-1} J_k
    t = np.einsum("kaa->k", A)
    T2 = np.einsum("mab,kba->mk", A, A)
    return gdet, t, T2


def eval_constraints(cset: ConstraintSet, u, warm_x):
    return cset.values(u, warm_x)


def constraint_gradients(cset: ConstraintSet, u, warm_x):
    return cset.bundle(u, warm_x).dg_du


def lagrangian_hessian_block(cset: ConstraintSet, z, bundle: DerivativeBundle):
    return cset.lagrangian_hessian(z, bundle)


class OPFPathConstraints:
    """The same ConstraintSet at every interior corner of a path.

    Keeps one accepted power-flow state per corner and warm-starts each new
    solve at that corner from it, so every corner stays on its own branch of
    x(u).
    """

    def __init__(self, cset: ConstraintSet, states, threads=1):
        self.cset = cset
        self.states = np.array(states, dtype=float)
        self.threads = max(1, int(threads))
        self.n_ineq = cset.n_ineq

    @classmethod
    def along(cls, cset: ConstraintSet, P, x_start, threads=1):
        """Initial states by sweeping the corners in order from ``x_start``."""
        x = np.asarray(x_start, dtype=float)
        states = []
        for u in np.asarray(P, dtype=float):
            x = cset.solve_state(u, x)
            states.append(x)
        return cls(cset, states, threads)

    def _map(self, fn, items):
        if self.threads == 1 or len(items) < 2:
            return [fn(*a) for a in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(lambda a: fn(*a), items))

    def evaluate(self, P):
        out = self._map(self.cset.values, list(zip(P, self.states)))
        return np.array([g for g, _ in out]), np.array([x for _, x in out])

    def derivatives(self, P, Z, state):
        X = self.states if state is None else state
        bs = self._map(self.cset.bundle, list(zip(P, X, Z)))
        return (np.array([b.g for b in bs]), np.array([b.dg_du for b in bs]),
                np.array([b.lag_hess for b in bs]))

    def accept(self, state):
        if state is not None:
            self.states = np.array(state)
