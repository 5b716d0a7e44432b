"""Feasible-path generation by tightening relaxations, then a final polish.

Starting from the straight line, each violated constraint j is relaxed to
g_j - v_j with v_j slightly above its worst violation along the path. A
barrier solve with a large barrier parameter pushes the path into the
interior of the relaxed set, the violations are re-measured and v shrinks.
When v is (numerically) zero the path is feasible and one more solve with a
small barrier parameter shortens it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ipm import BarrierResult, IPMParams, barrier_solve
from .path import init_line_path

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HomotopyParams:
    beta: float = 1.01
    mu_hi: float = 1e-1
    mu_lo: float = 1e-6
    eps_st: float = 1e-3
    patience: int = 1
    max_stages: int = 500

    def __post_init__(self):
        if not self.beta > 1.0:
            raise ValueError("beta must exceed 1")
        if not self.mu_hi > self.mu_lo > 0.0:
            raise ValueError("need mu_hi > mu_lo > 0")
        if self.eps_st < 0 or self.patience < 1:
            raise ValueError("eps_st must be nonnegative and patience at least 1")


class Relaxed:
    """Point constraints g - v sharing the wrapped object's state."""

    def __init__(self, base, v):
        self.base = base
        self.v = np.asarray(v, dtype=float)
        self.n_ineq = base.n_ineq

    def evaluate(self, P):
        G, state = self.base.evaluate(P)
        return G - self.v, state

    def derivatives(self, P, Z, state):
        G, dG, H = self.base.derivatives(P, Z, state)
        return G - self.v, dG, H

    def accept(self, state):
        self.base.accept(state)


def relaxation_vector(G, beta, exempt=None) -> np.ndarray:
    """v_j = beta * max_i max(g_j(p_i), 0); exempt entries forced to 0."""
    v = beta * np.maximum(np.max(np.asarray(G), axis=0), 0.0)
    if exempt is not None:
        v[np.asarray(exempt)] = 0.0
    return v


@dataclass
class Stage:
    index: int
    v_inf: float
    inner_status: str
    inner_iterations: int
    E_mu: float
    mu: float

    def as_dict(self):
        return dict(index=self.index, v_inf=self.v_inf, inner_status=self.inner_status,
                    inner_iterations=self.inner_iterations, E_mu=self.E_mu, mu=self.mu)


@dataclass
class HomotopyResult:
    status: str  # success | stagnation_failure | inner_failure
    P: np.ndarray
    v: np.ndarray
    max_violation_before: float
    max_violation_after: float  # max of g - v for the v of the last solve
    max_violation_after_raw: float  # max of the unrelaxed g
    stages: list = field(default_factory=list)
    inner_traces: list = field(default_factory=list)
    message: str = ""

    @property
    def v_inf(self) -> float:
        return float(np.max(self.v, initial=0.0))


def shortest_path(t, u0, u1, cons, hparams: HomotopyParams = HomotopyParams(),
                  iparams: IPMParams = IPMParams(), exempt=None, trace_stream=None,
                  P_init=None) -> HomotopyResult:
    """Outer loop. ``cons`` evaluates the unrelaxed constraints at each corner.

    The loop starts from the straight line unless ``P_init`` (interior corners
    of an earlier path on the same spacing) is given.

    ``exempt`` lists constraint indices never relaxed (the determinant
    constraint). Hard inner failures (exceptions) end the loop with status
    inner_failure; an inner solve that stops on its iteration cap or after the
    correction retry still hands back its path, as the outer loop expects.
    """
    eps_ls = iparams.eps_ls
    disc = init_line_path(u0, u1, t)
    P = disc.p.copy() if P_init is None else disc.with_points(P_init).p.copy()
    G, state = cons.evaluate(P)
    cons.accept(state)
    before = float(np.max(G))
    v = relaxation_vector(G, hparams.beta, exempt)
    stages, traces = [], []

    def run(vec, P_start, mu, index):
        res: BarrierResult = barrier_solve(t, u0, u1, Relaxed(cons, vec), P_start, mu, iparams,
                                           trace_stream=trace_stream)
        stages.append(Stage(index, float(np.max(vec, initial=0.0)), res.status,
                            res.iterations, res.E_mu, mu))
        traces.append(res.trace)
        return res

    def finish(status, P_end, vec, msg=""):
        G_end, _ = cons.evaluate(P_end)
        return HomotopyResult(status, P_end, vec, before, float(np.max(G_end - vec)),
                              float(np.max(G_end)), stages, traces, msg)

    stalls = 0
    stage = 0
    while np.max(v, initial=0.0) > eps_ls:
        stage += 1
        if stage > hparams.max_stages:
            return finish("stagnation_failure", P, v, "stage limit reached")
        try:
            res = run(v, P, hparams.mu_hi, stage)
        except Exception as exc:
            log.info("inner solve failed at stage %d: %s", stage, exc)
            return finish("inner_failure", P, v, f"stage {stage}: {exc}")
        P = res.P
        G, _ = cons.evaluate(P)
        v_prev = v
        v = np.minimum(relaxation_vector(G, hparams.beta, exempt), v_prev)
        log.info("stage %d: |v|=%.3e (%s, %d its)", stage, np.max(v, initial=0.0),
                 res.status, res.iterations)
        if np.max(np.abs(v - v_prev), initial=0.0) <= hparams.eps_st and np.max(v, initial=0.0) > eps_ls:
            stalls += 1
            if stalls >= hparams.patience:
                return finish("stagnation_failure", P, v,
                              f"relaxation stalled at |v|={np.max(v):.3e} after stage {stage}")
        else:
            stalls = 0
    v_final = np.full_like(v, eps_ls)
    if exempt is not None:
        v_final[np.asarray(exempt)] = 0.0
    try:
        res = run(v_final, P, hparams.mu_lo, stage + 1)
    except Exception as exc:
        return finish("inner_failure", P, v, f"final stage: {exc}")
    out = finish("success", res.P, v_final)
    if not math.isfinite(out.max_violation_after) or out.max_violation_after >= 0:
        out.status = "inner_failure"
        out.message = f"final path violates the relaxed constraints by {out.max_violation_after:.3e}"
    elif res.status != "converged":
        out.message = f"final barrier solve ended with status {res.status}"
    return out
