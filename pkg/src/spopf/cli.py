"""Command-line front end: ``spopf solve | powerflow | check-derivatives``.

``solve`` writes three artifacts into the output directory: ``path.csv``
(all corners, external units), ``report.json`` and, with ``--trace``,
``trace.jsonl`` holding one JSON object per interior-point iteration.
Exit codes: 0 success, 2 stagnation failure, 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .case_model import CaseError, build_quadratic_model, load_case, merge_generators
from .constraints import (
    ConstraintSet,
    EvaluationError,
    state_sensitivity,
    state_sensitivity_second,
)
from .homotopy import shortest_path
from .metrics import path_metrics
from .path import (
    PathDiscretization,
    equality_constraints,
    equality_hessian_term,
    equality_jacobian_dense,
    objective,
    objective_hessian,
    path_from_csv,
    path_to_csv,
    tridiag_kron,
)
from .power_flow import solve_power_flow
from .scenario import Scenario, ScenarioError, build_problem, load_scenario, parse_control_name

log = logging.getLogger("spopf")

EXIT_OK, EXIT_ERROR, EXIT_STAGNATION = 0, 1, 2
_EXIT = {"success": EXIT_OK, "stagnation_failure": EXIT_STAGNATION, "inner_failure": EXIT_ERROR}
DATA_DIR = Path(__file__).parent / "data"


def _finite(x):
    """JSON-safe float: non-finite values become null."""
    x = float(x)
    return x if math.isfinite(x) else None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


# -- solve ---------------------------------------------------------------------


def run_solve(scenario: Scenario, out_dir=None, threads=1, trace=False, case=None,
              resume=None):
    """Run the homotopy for one scenario; returns (report dict, exit code).

    ``resume`` is the text of an earlier path CSV on the same spacing; its
    interior corners replace the straight line as the starting path.
    """
    start = time.perf_counter()
    problem = build_problem(scenario, case=case, threads=threads)
    P_init = None
    if resume is not None:
        disc, _ = path_from_csv(resume)
        same_shape = (disc.t.shape, disc.u0.shape) == (scenario.t.shape, scenario.u0.shape)
        if not (same_shape and np.allclose(disc.t, scenario.t)
                and np.allclose(disc.u0, scenario.u0) and np.allclose(disc.u1, scenario.u1)):
            raise ScenarioError("resume path does not match the scenario's spacing and endpoints")
        P_init = scenario.to_internal(disc.p)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stream = open(out / "trace.jsonl", "w", encoding="utf-8") if (trace and out) else None
    try:
        res = shortest_path(problem.t, problem.u0, problem.u1, problem.cons, scenario.homotopy,
                            scenario.ipm, exempt=problem.exempt, trace_stream=stream,
                            P_init=P_init)
    finally:
        if stream is not None:
            stream.close()
    wall = time.perf_counter() - start

    corners_ext = scenario.to_external(np.vstack([problem.u0, res.P, problem.u1]))
    disc = PathDiscretization(scenario.t, corners_ext[0], corners_ext[-1], corners_ext[1:-1])
    diff_pct, gap_pct = path_metrics(disc.corners)
    labels = problem.cset.info
    worst = int(np.argmax(res.v)) if res.v.size else 0
    report = dict(
        status=res.status,
        message=res.message,
        scenario=scenario.as_dict(),
        ipm_params=vars(scenario.ipm).copy(),
        homotopy_params=vars(scenario.homotopy).copy(),
        n_constraints=problem.cset.n_ineq,
        max_violation_before=_finite(res.max_violation_before),
        max_violation_after=_finite(res.max_violation_after),
        max_violation_after_raw=_finite(res.max_violation_after_raw),
        v_inf=_finite(res.v_inf),
        v_inf_label=labels[worst].label if res.v_inf > 0 else None,
        path_diff_pct=_finite(diff_pct),
        obj_fun_gap_pct=_finite(gap_pct),
        stages=[s.as_dict() for s in res.stages],
        total_inner_iterations=int(sum(s.inner_iterations for s in res.stages)),
        wall_time_s=wall,
    )
    if trace:
        report["inner_traces"] = res.inner_traces
    if out is not None:
        (out / "path.csv").write_text(path_to_csv(disc, scenario.controls), encoding="utf-8")
        (out / "report.json").write_text(_dump(report), encoding="utf-8")
    return report, _EXIT[res.status]


# -- derivative checks -----------------------------------------------------------


@dataclass
class DerivativeCheck:
    family: str
    max_rel_error: float
    tolerance: float
    n_points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, reference, floor=1e-3) -> float:
    """Largest row-wise relative deviation, rows scaled by their own max norm.

    Rows (leading axis) whose reference is small are scaled by ``floor`` times
    the largest reference entry instead, so structurally zero rows (the slack
    bus states, say) compare their difference noise against a meaningful size.
    """
    A = np.atleast_2d(np.asarray(analytic, dtype=float))
    B = np.atleast_2d(np.asarray(reference, dtype=float))
    A = A.reshape(A.shape[0], -1)
    B = B.reshape(B.shape[0], -1)
    big = max(np.max(np.abs(B)), 1e-300)
    scale = np.maximum(np.max(np.abs(B), axis=1), floor * big)
    return float(np.max(np.max(np.abs(A - B), axis=1) / scale))


def central_difference(fun, u, h=1e-6):
    """Jacobian of ``fun`` at ``u`` by central differences; columns index u."""
    u = np.asarray(u, dtype=float)
    cols = []
    for j in range(u.size):
        step = h * max(1.0, abs(u[j]))
        e = np.zeros_like(u)
        e[j] = step
        cols.append((np.asarray(fun(u + e)) - np.asarray(fun(u - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def control_box(cset: ConstraintSet):
    """Lower and upper limits of the free controls (model units)."""
    lo = np.full(cset.m, -np.inf)
    hi = np.full(cset.m, np.inf)
    for row, c in zip(cset.A_u, cset.c_u):
        j = int(np.flatnonzero(row)[0])
        if row[j] > 0:
            hi[j] = min(hi[j], -c)
        else:
            lo[j] = max(lo[j], c)
    return lo, hi


def feasible_points(cset: ConstraintSet, n_points, rng, max_tries=None):
    """Uniform samples of the control box with g < 0 and converged power flow."""
    lo, hi = control_box(cset)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("free controls need finite limits for sampling")
    x_ref = cset.model.initial_state()
    pts = []
    tries = 0
    max_tries = max_tries or 500 * n_points
    while len(pts) < n_points:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"found only {len(pts)} strictly feasible points in {max_tries} draws")
        u = lo + rng.random(cset.m) * (hi - lo)
        try:
            g, x = cset.values(u, x_ref)
        except EvaluationError:
            continue
        if np.all(g < 0):
            pts.append((u, x))
    return pts


def check_derivatives(cset: ConstraintSet, seed=0, n_points=20, corrupt=None, h=1e-6,
                      first_tol=1e-5, second_tol=1e-4, K=5) -> list[DerivativeCheck]:
    """Compare analytic derivatives with central differences at random points.

    ``corrupt`` ("gradient" or "hessian") perturbs the analytic values by 1%
    to demonstrate that the harness flags wrong derivatives.
    """
    rng = np.random.default_rng(seed)
    fd_cset = ConstraintSet.__new__(ConstraintSet)
    fd_cset.__dict__.update(cset.__dict__)
    fd_cset.pf_tol = 1e-12  # differences of states need a tightly converged x(u)
    pts = feasible_points(fd_cset, n_points, rng)
    model = cset.model
    fam = {}

    def record(name, err, tol):
        fam.setdefault(name, [0.0, tol])
        fam[name][0] = max(fam[name][0], err)

    gscale = 1.01 if corrupt == "gradient" else 1.0
    hscale = 1.01 if corrupt == "hessian" else 1.0
    for u, x in pts:
        b = fd_cset.bundle(u, x)
        state = lambda v: fd_cset.solve_state(v, x)  # noqa: E731
        record("power-flow sensitivity dx/du",
               relative_error(b.dx_du, central_difference(state, u, h)), first_tol)

        def sens(v):
            xv = fd_cset.solve_state(v, x)
            return state_sensitivity(model, xv, fd_cset.free)

        d2 = central_difference(sens, u, h)  # (dim, m, m)
        for mm in range(cset.m):
            an = state_sensitivity_second(model, b.x, b.dx_du, mm, lu=b.lu)
            record("power-flow second sensitivity", relative_error(an, d2[:, :, mm]), second_tol)

        gfun = lambda v: fd_cset.values(v, x)[0]  # noqa: E731
        record("constraint gradients dg/du",
               relative_error(gscale * b.dg_du, central_difference(gfun, u, h)), first_tol)

        z = rng.random(cset.n_ineq)
        H = hscale * fd_cset.lagrangian_hessian(z, b)
        zg = lambda v: z @ fd_cset.bundle(v, x).dg_du  # noqa: E731
        record("constraint Lagrangian Hessian", relative_error(H, central_difference(zg, u, h)),
               second_tol)

        # path quantities on a random path through this point's neighbourhood
        t = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0.02, 0.98, K)]))
        P = u + 0.1 * rng.standard_normal((K + 2, cset.m))
        disc = PathDiscretization(t, P[0], P[-1], P[1:-1])
        flat = disc.flat()
        phi = lambda q: objective(disc.with_points(q))[0]  # noqa: E731
        grad = objective(disc)[1].reshape(-1)
        record("path objective gradient", relative_error(grad[None], central_difference(phi, flat, h)[None]),
               first_tol)
        cE = lambda q: equality_constraints(disc.with_points(q))[0]  # noqa: E731
        record("spacing Jacobian D_E",
               relative_error(equality_jacobian_dense(disc), central_difference(cE, flat, h)), first_tol)
        gphi = lambda q: objective(disc.with_points(q))[1].reshape(-1)  # noqa: E731
        Y = np.kron(2 * objective_hessian(disc.w), np.eye(cset.m))
        record("path objective Hessian", relative_error(Y, central_difference(gphi, flat, h)), second_tol)
        y = rng.standard_normal(K)
        dEy = lambda q: equality_jacobian_dense(disc.with_points(q)).T @ y  # noqa: E731
        HE = tridiag_kron(*equality_hessian_term(disc.w, y), cset.m)
        record("spacing Hessian y'c_E", relative_error(HE, central_difference(dEy, flat, h)), second_tol)
    return [DerivativeCheck(k, v[0], v[1], len(pts)) for k, v in fam.items()]


def format_checks(rows) -> str:
    width = max(len(r.family) for r in rows)
    lines = [f"{'family':<{width}}  {'max rel error':>13}  {'tolerance':>9}  result"]
    for r in rows:
        lines.append(f"{r.family:<{width}}  {r.max_rel_error:13.3e}  {r.tolerance:9.1e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


# -- power flow ------------------------------------------------------------------


def parse_assignments(text: str) -> dict:
    """'P2=1.63, V1=1.04' -> {('P', 2): 1.63, ('V2', 1): 1.0816} (V squared)."""
    out = {}
    for item in filter(None, (s.strip() for s in text.replace(";", ",").split(","))):
        name, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"assignment {item!r} lacks '='")
        kind, bus = parse_control_name(name)
        v = float(val)
        out[(kind, bus)] = v * v if kind == "V2" else v
    return out


def run_powerflow(case, assignments: dict, tol=1e-8, max_iter=20):
    if case.needs_merge:
        case = merge_generators(case)
    model = build_quadratic_model(case)
    u = model.default_controls()
    for lab, val in assignments.items():
        u[model.control_index(lab)] = val
    return model, solve_power_flow(model, u, model.initial_state(), tol=tol, max_iter=max_iter)


def format_powerflow(model, res) -> str:
    n = model.n
    e, f = res.x[:n], res.x[n:]
    lines = [f"converged {res.converged}", f"iterations {res.iterations}",
             f"residual_inf {res.residual_inf:.17g}", "bus,e,f,Vm,Va_deg"]
    for b, ei, fi in zip(model.case.buses, e, f):
        lines.append(f"{b.id},{ei:.17g},{fi:.17g},{math.hypot(ei, fi):.17g},"
                     f"{math.degrees(math.atan2(fi, ei)):.17g}")
    return "\n".join(lines)


# -- argument parsing ----------------------------------------------------------------

_IPM_FLAGS = [("tau", float), ("gamma", float), ("eta", float), ("eps_ls", float),
              ("rho_max", float), ("eps_tol", float), ("iter_max", int)]
_HOM_FLAGS = [("beta", float), ("mu_hi", float), ("mu_lo", float), ("eps_st", float),
              ("patience", int), ("max_stages", int)]


def _resolve(path):
    """A path as given, else the bundled data file of that name."""
    p = Path(path)
    if not p.exists() and (DATA_DIR / p.name).exists():
        return DATA_DIR / p.name
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spopf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="compute a feasible shortest path for a scenario")
    s.add_argument("--scenario", required=True, help="scenario JSON (or a bundled scenario name)")
    s.add_argument("--case", help="case file; overrides the scenario's case reference")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.add_argument("--trace", action="store_true", help="write per-iteration traces")
    s.add_argument("--resume", help="start from this path CSV instead of the straight line")
    s.add_argument("--enable-det-constraint", action="store_true")
    s.add_argument("--no-flow-limits", action="store_true")
    s.add_argument("--no-angle-limits", action="store_true")
    s.add_argument("--K", type=int, help="number of interior corners (uniform spacing)")
    s.add_argument("--debug-kkt", action="store_true", help="record full-system residuals")
    for name, typ in _IPM_FLAGS + _HOM_FLAGS:
        s.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)

    p = sub.add_parser("powerflow", help="solve one power flow")
    p.add_argument("--case", required=True)
    p.add_argument("--u", default="", help="control assignments, e.g. 'P2=1.63,V1=1.04'")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20)

    c = sub.add_parser("check-derivatives", help="finite-difference derivative checks")
    c.add_argument("--case", help="case file (defaults to the scenario's case)")
    c.add_argument("--scenario", help="scenario JSON selecting free controls and toggles")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=20)
    c.add_argument("--controls", help="free controls, e.g. 'P2,P3' (default: all PV active powers)")
    c.add_argument("--enable-det-constraint", action="store_true")
    c.add_argument("--corrupt", choices=["gradient", "hessian"], help=argparse.SUPPRESS)
    return ap


def _scenario_from_args(args) -> Scenario:
    sc = load_scenario(_resolve(args.scenario))
    ipm = {k: getattr(args, k) for k, _ in _IPM_FLAGS if getattr(args, k) is not None}
    if args.debug_kkt:
        ipm["debug_check"] = True
    hom = {k: getattr(args, k) for k, _ in _HOM_FLAGS if getattr(args, k) is not None}
    changes = dict(ipm=replace(sc.ipm, **ipm), homotopy=replace(sc.homotopy, **hom))
    if args.case:
        changes["case_ref"] = _resolve(args.case)
    if args.enable_det_constraint:
        changes["det_constraint"] = True
    if args.no_flow_limits:
        changes["flow_limits"] = False
    if args.no_angle_limits:
        changes["angle_limits"] = False
    if args.K is not None:
        changes["K"] = args.K
        changes["t"] = None
    return replace(sc, **changes)


def _cmd_solve(args) -> int:
    sc = _scenario_from_args(args)
    resume = Path(args.resume).read_text(encoding="utf-8") if args.resume else None
    report, code = run_solve(sc, args.out, threads=args.threads, trace=args.trace, resume=resume)
    print(f"status {report['status']}")
    for key in ("max_violation_before", "max_violation_after", "v_inf", "path_diff_pct",
                "obj_fun_gap_pct", "wall_time_s"):
        val = report[key]
        print(f"{key} {'null' if val is None else format(val, '.17g')}")
    if report["message"]:
        print(f"message {report['message']}")
    return code


def _cmd_powerflow(args) -> int:
    model, res = run_powerflow(load_case(_resolve(args.case)), parse_assignments(args.u),
                               tol=args.tol, max_iter=args.max_iter)
    print(format_powerflow(model, res))
    return EXIT_OK if res.converged else EXIT_ERROR


def _cmd_check(args) -> int:
    if args.scenario:
        sc = load_scenario(_resolve(args.scenario))
        if args.case:
            sc = replace(sc, case_ref=_resolve(args.case))
        if args.enable_det_constraint:
            sc = replace(sc, det_constraint=True)
        cset = build_problem(sc).cset
    elif args.case:
        case = load_case(_resolve(args.case))
        if case.needs_merge:
            case = merge_generators(case)
        model = build_quadratic_model(case)
        if args.controls:
            labels = [parse_control_name(c) for c in args.controls.split(",")]
        else:
            labels = [lab for lab in model.control_labels if lab[0] == "P"]
        free = [model.control_index(lab) for lab in labels]
        cset = ConstraintSet(model, free, det_constraint=args.enable_det_constraint)
    else:
        raise ScenarioError("check-derivatives needs --case or --scenario")
    rows = check_derivatives(cset, seed=args.seed, n_points=args.points, corrupt=args.corrupt)
    print(format_checks(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    handlers = {"solve": _cmd_solve, "powerflow": _cmd_powerflow, "check-derivatives": _cmd_check}
    try:
        return handlers[args.command](args)
    except (ScenarioError, CaseError, OSError, ValueError, RuntimeError) as exc:
        print(f"spopf: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
