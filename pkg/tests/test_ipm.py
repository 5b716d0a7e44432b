"""Barrier interior-point solver: pieces, Newton system, line search, loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from spopf.ipm import (
    BarrierIterate,
    ExplicitConstraints,
    InfeasibleStartError,
    IPMParams,
    _Evaluator,
    assemble_reduced_kkt,
    barrier_solve,
    error_metric,
    fraction_to_boundary,
    full_system,
    full_system_residual,
    inertia_correction,
    kkt_pieces,
    line_search,
    merit,
    newton_step,
    equality_curvature_bound,
)
from spopf.path import (
    PathDiscretization,
    equality_hessian_term,
    equality_jacobian_dense,
    objective,
    tridiag_kron,
    uniform_spacing,
)

T1 = np.array([0.0, 0.5, 1.0])
U0, U1 = np.array([0.0, 0.0]), np.array([1.0, 0.0])


def box(lo=0.2, hi=0.9):
    """lo <= p_y <= hi at the single corner."""
    return ExplicitConstraints(lambda p: np.array([lo - p[1], p[1] - hi]),
                               lambda p: np.array([[0.0, -1.0], [0.0, 1.0]]), n_ineq=2)


def box_minimizer(mu, lo=0.2, hi=0.9):
    """phi = 1 + 4 y^2 at p_x = 1/2; stationarity of the barrier function in y."""
    return brentq(lambda y: 8 * y - mu / (y - lo) + mu / (hi - y), lo + 1e-15, hi - 1e-15,
                  xtol=1e-15)


def random_iterate(rng, K=4, m=2, nI=3, on_slack=True):
    t = uniform_spacing(K)
    u0, u1 = rng.normal(size=(2, m))
    P = u0 + t[1:-1, None] * (u1 - u0) + 0.2 * rng.normal(size=(K, m))
    disc = PathDiscretization(t, u0, u1, P)
    G = -rng.uniform(0.1, 1.0, (K, nI))
    dG = rng.normal(size=(K, nI, m))
    Hh = rng.normal(size=(K, m, m))
    H = Hh + np.transpose(Hh, (0, 2, 1))
    s = -G if on_slack else rng.uniform(0.1, 1.0, (K, nI))
    it = BarrierIterate(P, s, rng.normal(size=K), rng.uniform(0.1, 2.0, (K, nI)), 0.05)
    return it, kkt_pieces(disc, it, G, dG, H)


class TestParams:
    def test_defaults(self):
        p = IPMParams()
        assert (p.tau, p.gamma, p.eta, p.eps_ls, p.rho_max, p.iter_max) == (
            0.99, 0.5, 1e-4, 1e-6, 100.0, 100)
        assert p.eps_tol == 1e-3

    @pytest.mark.parametrize("bad", [dict(tau=1.0), dict(gamma=0.0), dict(eps_tol=-1.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            IPMParams(**bad)


class TestFractionToBoundary:
    def test_example(self):
        assert fraction_to_boundary([1, 1], [-2, 0.5], 0.99) == pytest.approx(0.495)

    def test_no_approach(self):
        assert fraction_to_boundary([1, 2], [0.0, 3.0], 0.99) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 0.999))
    def test_keeps_fraction(self, seed, tau):
        rng = np.random.default_rng(seed)
        z = rng.uniform(0.01, 10, 8)
        dz = rng.normal(scale=5, size=8)
        a = fraction_to_boundary(z, dz, tau)
        assert 0 < a <= 1
        assert np.all(z + a * dz >= (1 - tau) * z - 1e-12 * z)


class TestInertia:
    def test_zero_multipliers(self, rng):
        H = rng.normal(size=(3, 2, 2))
        assert np.allclose(inertia_correction(np.ones(4), np.zeros(3), H),
                           np.linalg.norm(H, axis=(1, 2)))
        assert equality_curvature_bound(np.ones(4), np.zeros(3)) == 0.0

    def test_corrected_hessian_psd(self, rng):
        for _ in range(50):
            K, m = int(rng.integers(1, 12)), int(rng.integers(1, 4))
            w = rng.uniform(0.1, 30, K + 1)
            y = rng.normal(scale=3, size=K)
            Hh = rng.normal(size=(K, m, m))
            H = Hh + np.transpose(Hh, (0, 2, 1))
            delta = inertia_correction(w, y, H)
            M = tridiag_kron(*equality_hessian_term(w, y), m)
            for i in range(K):
                sl = slice(i * m, (i + 1) * m)
                M[sl, sl] += H[i] + delta[i] * np.eye(m)
            assert np.linalg.eigvalsh(M).min() >= -1e-10


class TestReducedSystem:
    def test_single_corner_blocks(self, rng):
        """K = 1, no inequalities, y = 0: the only block is Phi_1 + Phi_2."""
        m = 1
        disc = PathDiscretization(T1, [0.0], [1.0], [[0.3]])
        it = BarrierIterate(disc.p, np.zeros((1, 0)), np.zeros(1), np.zeros((1, 0)), 0.1)
        kp = kkt_pieces(disc, it, np.zeros((1, 0)), np.zeros((1, 0, m)), np.zeros((1, m, m)))
        btd, _ = assemble_reduced_kkt(it, kp)
        w = disc.w
        d1, d2 = disc.d[:, 0]
        hand = np.array([[2 * w[0] + 2 * w[1], 2 * w[0] * d1 + 2 * w[1] * d2],
                         [2 * w[0] * d1 + 2 * w[1] * d2, 0.0]])
        assert np.allclose(btd.diag[0], hand, rtol=0, atol=1e-14)

    def test_matches_permuted_dense(self, rng):
        it, kp = random_iterate(rng)
        K, m = it.P.shape
        delta = rng.uniform(0, 1, K)
        btd, rhs = assemble_reduced_kkt(it, kp, delta)
        # dense reduced system in (p, y) ordering
        hd, ho = equality_hessian_term(kp.w, it.y)
        w = kp.w
        HL = tridiag_kron(2 * (w[:-1] + w[1:]) + hd, -2 * w[1:-1] + ho, m)
        Sigma = it.z / it.s
        for i in range(K):
            sl = slice(i * m, (i + 1) * m)
            HL[sl, sl] += kp.dG[i].T @ (Sigma[i][:, None] * kp.dG[i]) + kp.H[i] + delta[i] * np.eye(m)
        DE = equality_jacobian_dense(kp.disc)
        dense = np.block([[HL, DE.T], [DE, np.zeros((K, K))]])
        perm = np.concatenate([np.r_[np.arange(i * m, (i + 1) * m), K * m + i] for i in range(K)])
        assert np.allclose(btd.to_dense(), dense[np.ix_(perm, perm)], rtol=0, atol=1e-12)

    def test_upper_left_is_objective_hessian(self, rng):
        it, kp = random_iterate(rng)
        K, m = it.P.shape
        it.y[:] = 0.0
        it.z[:] = 0.0
        kp.H[:] = 0.0
        btd, _ = assemble_reduced_kkt(it, kp)
        w = kp.w
        for i in range(K):
            assert np.allclose(btd.diag[i][:m, :m], 2 * (w[i] + w[i + 1]) * np.eye(m))

    @pytest.mark.parametrize("on_slack", [True, False])
    def test_step_solves_full_system(self, rng, on_slack):
        for _ in range(10):
            it, kp = random_iterate(rng, on_slack=on_slack)
            delta = rng.uniform(0, 2, it.P.shape[0])
            btd, rhs = assemble_reduced_kkt(it, kp, delta)
            step = newton_step(it, kp, btd, rhs)
            assert full_system_residual(it, kp, step, delta) <= 1e-9
            A, b = full_system(it, kp, delta)
            ref = np.linalg.solve(A, b)
            got = np.concatenate([step.dp.ravel(), step.ds.ravel(), step.dy, step.dz.ravel()])
            assert np.allclose(got, ref, rtol=0, atol=1e-10 * max(1.0, np.abs(ref).max()))


class TestErrorMetric:
    def _reference(self, it, kp, rho_max):
        """From scratch: dense D_E, dense D_I, no shared helpers."""
        K, nI = it.s.shape
        DE = equality_jacobian_dense(kp.disc)
        grad = objective(kp.disc)[1].ravel() + DE.T @ it.y
        for i in range(K):
            grad[i * it.P.shape[1]:(i + 1) * it.P.shape[1]] += kp.dG[i].T @ it.z[i]
        rho_d = max(rho_max, (np.sum(np.abs(it.y)) + np.sum(np.abs(it.z))) / (K + K * nI)) / rho_max
        rho_c = max(rho_max, np.sum(np.abs(it.z)) / (K * nI)) / rho_max
        return max(np.abs(grad).max() / rho_d, np.abs(it.s * it.z - it.mu).max() / rho_c,
                   np.abs(kp.cE).max())

    def test_independent_recomputation(self, rng):
        for scale in (1.0, 1e4):
            it, kp = random_iterate(rng)
            it.z *= scale
            kp = kkt_pieces(kp.disc, it, kp.G, kp.dG, kp.H)
            assert error_metric(it, kp, 100.0) == pytest.approx(self._reference(it, kp, 100.0),
                                                                rel=1e-14, abs=1e-14)

    def test_unscaled_regime(self, rng):
        it, kp = random_iterate(rng)
        unscaled = max(np.abs(kp.grad_L).max(), np.abs(it.s * it.z - it.mu).max(),
                       np.abs(kp.cE).max())
        assert error_metric(it, kp, 100.0) == unscaled


class TestMerit:
    def test_violation_is_infinite(self):
        assert merit(1.0, np.array([[-1.0, 0.0]]), 0.1) == math.inf
        assert merit(1.0, None, 0.1) == math.inf

    def test_vanishing_barrier(self):
        G = -np.full((3, 2), 0.5)
        assert merit(2.0, G, 1e-12) == pytest.approx(2.0, abs=1e-10)
        assert merit(2.0, G, 0.1) == pytest.approx(2.0 + 0.6 * math.log(2))


class TestLineSearch:
    def _setup(self, P, mu=0.1):
        ev = _Evaluator(T1, U0, U1, box())
        G, _ = ev.try_eval(P)
        disc = ev.disc(P)
        it = BarrierIterate(P, -G, np.zeros(1), mu / -G, mu)
        psi = merit(objective(disc)[0], G, mu)
        grad = objective(disc)[1] + mu * np.einsum("kjm,kj->km",
                                                   np.array([[[0.0, -1.0], [0.0, 1.0]]]), 1 / it.s)
        return ev, it, psi, grad

    def test_full_step_in_mild_geometry(self):
        ev, it, psi, grad = self._setup(np.array([[0.5, 0.5]]))
        dp = np.array([[0.0, -0.05]])
        M, ok, trial = line_search(ev, it, psi, float(np.sum(grad * dp)), dp, IPMParams())
        assert ok and M == 0
        P_new, G, _, psi_new = trial
        assert psi_new <= psi + 1e-4 * float(np.sum(grad * dp))

    def test_boundary_forces_backtracking(self):
        ev, it, psi, grad = self._setup(np.array([[0.5, 0.5]]))
        dp = np.array([[0.0, -0.6]])  # would cross p_y = 0.2
        M, ok, trial = line_search(ev, it, psi, float(np.sum(grad * dp)), dp, IPMParams())
        assert ok and M >= 1
        a = 0.5 ** M
        assert trial[1].max() < 0
        assert trial[3] <= psi + 1e-4 * a * float(np.sum(grad * dp))

    def test_rejects_ascent(self):
        ev, it, psi, grad = self._setup(np.array([[0.5, 0.5]]))
        dp = np.array([[0.0, 0.3]])
        M, ok, _ = line_search(ev, it, psi, -1.0, dp, IPMParams())
        assert not ok and 0.5 ** M <= 1e-6


class TestBarrierSolve:
    @pytest.mark.parametrize("mu", [1e-1, 1e-3, 1e-6])
    def test_box_minimizer(self, mu):
        res = barrier_solve(T1, U0, U1, box(), np.array([[0.5, 0.5]]), mu,
                            IPMParams(eps_tol=1e-10, debug_check=True))
        assert res.status == "converged"
        assert res.P[0, 0] == pytest.approx(0.5, abs=1e-9)
        assert res.P[0, 1] == pytest.approx(box_minimizer(mu), abs=1e-6)
        assert np.all(res.s > 0) and np.all(res.z > 0)
        assert all(row["kkt_residual"] <= 1e-9 for row in res.trace)
        merits = [row["merit"] for row in res.trace]
        assert all(b <= a for a, b in zip(merits, merits[1:]))

    def test_step_vanishes_at_solution(self):
        params = IPMParams(eps_tol=1e-12)
        res = barrier_solve(T1, U0, U1, box(), np.array([[0.5, 0.5]]), 1e-2, params)
        it = BarrierIterate(res.P, res.s, res.y, res.z, 1e-2)
        cons = box()
        G, dG, H = cons.derivatives(res.P, res.z, None)
        kp = kkt_pieces(PathDiscretization(T1, U0, U1, res.P), it, G, dG, H)
        step = newton_step(it, kp, *assemble_reduced_kkt(it, kp))
        biggest = max(np.abs(v).max() for v in (step.dp, step.dy, step.dz, step.ds))
        assert biggest <= 1e-10

    def test_infeasible_start(self):
        with pytest.raises(InfeasibleStartError):
            barrier_solve(T1, U0, U1, box(), np.array([[0.5, 0.1]]), 0.1)

    def test_rank_safeguard_at_start(self):
        """A corner sitting on u0 leaves a zero-length first segment."""
        far_side = ExplicitConstraints(lambda p: -np.ones(1), lambda p: np.zeros((1, 2)), n_ineq=1)
        with pytest.raises(InfeasibleStartError, match="rank"):
            barrier_solve(T1, U0, U1, far_side, np.array([[0.0, 0.0]]), 0.1)

    def test_iteration_cap(self):
        res = barrier_solve(T1, U0, U1, box(), np.array([[0.5, 0.5]]), 1e-6,
                            IPMParams(eps_tol=1e-14, iter_max=2))
        assert res.status == "max_iter" and res.iterations == 2
        assert not res.success

    def test_trace_stream(self, tmp_path):
        import json

        path = tmp_path / "trace.jsonl"
        with open(path, "w") as fh:
            res = barrier_solve(T1, U0, U1, box(), np.array([[0.5, 0.5]]), 1e-3, trace_stream=fh)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert rows == res.trace
        assert set(rows[0]) == {"iter", "E_mu", "merit", "M", "alpha_z", "corrected"}

    def test_multi_corner_symmetric_detour(self):
        """A lower bound on p_y forces a detour that mirrors about x = 1/2."""
        t = uniform_spacing(9)
        cons = ExplicitConstraints(lambda p: np.array([0.1 - p[1]]),
                                   lambda p: np.array([[0.0, -1.0]]), n_ineq=1)
        # equal chords on a half circle: the spacing equalities hold at the start
        angle = np.pi * (1 - t[1:-1])
        P0 = 0.5 + 0.5 * np.column_stack([np.cos(angle), np.sin(angle)]) - [0.0, 0.5]
        res = barrier_solve(t, U0, U1, cons, P0, 1e-4, IPMParams(eps_tol=1e-8))
        assert res.status == "converged"
        assert np.allclose(res.P[:, 0] + res.P[::-1, 0], 1.0, atol=1e-6)
        assert np.allclose(res.P[:, 1], res.P[::-1, 1], atol=1e-6)
        assert np.all(res.P[:, 1] > 0.1)
        length = np.sum(np.linalg.norm(np.diff(np.vstack([U0, res.P, U1]), axis=0), axis=1))
        assert length < np.pi / 2
