"""Scenario files: which case, which controls move, the two endpoints.

A scenario is a JSON object::

    {
      "case": "case9_variant1.m",          # relative to the scenario file
      "controls": ["P2", "P3"],            # free controls, in path-column order
      "u0": [0.5, 0.5],                    # list in "controls" order, or {"P2": 0.5, ...}
      "u1": {"P2": 1.5, "P3": 1.3},
      "frozen_controls": {"V1": 1.0},      # optional overrides of held controls
      "power_unit": "pu",                  # or "MW" for P entries
      "K": 19,
      "spacing": "uniform",                # or the K interior parameters t_1..t_K
      "ipm": {"eps_tol": 1e-3},            # IPMParams overrides
      "homotopy": {"beta": 1.01},          # HomotopyParams overrides
      "det_constraint": false,
      "flow_limits": true,
      "angle_limits": true
    }

Control names are ``P<bus>`` (active injection of a PV unit) and ``V<bus>``
(voltage magnitude of a generator bus, in p.u.). Voltages are squared on the
way in because the model's control entries are V^2. Controls not listed as
free are held at the case set-points unless ``frozen_controls`` overrides
them; a frozen control that also appears in ``u0``/``u1`` must take the same
value at both endpoints.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .case_model import NetworkCase, build_quadratic_model, load_case, merge_generators
from .constraints import DET, ConstraintSet, EvaluationError, OPFPathConstraints
from .homotopy import HomotopyParams
from .ipm import IPMParams
from .path import uniform_spacing

DEFAULT_K = 19
_NAME = re.compile(r"^(P|V)(\d+)$")
_KEYS = {"name", "case", "controls", "u0", "u1", "frozen_controls", "power_unit", "K",
         "spacing", "ipm", "homotopy", "det_constraint", "flow_limits", "angle_limits"}


class ScenarioError(ValueError):
    """Invalid scenario contents."""


def parse_control_name(name: str) -> tuple[str, int]:
    """'P2' -> ('P', 2); 'V1' -> ('V2', 1), the model's squared-voltage label."""
    m = _NAME.match(str(name).strip())
    if not m:
        raise ScenarioError(f"bad control name {name!r}; expected P<bus> or V<bus>")
    return ("P" if m.group(1) == "P" else "V2", int(m.group(2)))


def _params(cls, overrides, what):
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ScenarioError(f"unknown {what} parameter(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{what}: {exc}") from exc


@dataclass(frozen=True)
class Scenario:
    case_ref: Path | None
    controls: tuple[str, ...]
    u0: np.ndarray  # external units: P in p.u., V in p.u.
    u1: np.ndarray
    frozen: dict = field(default_factory=dict)
    K: int = DEFAULT_K
    t: np.ndarray | None = None  # all K+2 parameters
    ipm: IPMParams = IPMParams()
    homotopy: HomotopyParams = HomotopyParams()
    det_constraint: bool = False
    flow_limits: bool = True
    angle_limits: bool = True
    name: str = ""

    def __post_init__(self):
        u0 = np.asarray(self.u0, dtype=float)
        u1 = np.asarray(self.u1, dtype=float)
        if u0.shape != (len(self.controls),) or u1.shape != u0.shape:
            raise ScenarioError("u0 and u1 must give one value per free control")
        if len(set(self.controls)) != len(self.controls):
            raise ScenarioError("duplicate free control")
        if set(self.controls) & set(self.frozen):
            raise ScenarioError("a control cannot be both free and frozen")
        if np.array_equal(u0, u1):
            raise ScenarioError("u0 and u1 coincide")
        if self.K < 1:
            raise ScenarioError("K must be at least 1")
        t = uniform_spacing(self.K) if self.t is None else np.asarray(self.t, dtype=float)
        if t.shape != (self.K + 2,) or t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ScenarioError("spacing must be strictly increasing inside (0, 1)")
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "t", t)

    @property
    def labels(self) -> list[tuple[str, int]]:
        return [parse_control_name(c) for c in self.controls]

    def to_internal(self, u) -> np.ndarray:
        """External control values (V in p.u.) to model values (V^2)."""
        u = np.array(u, dtype=float)
        sq = np.array([k == "V2" for k, _ in self.labels])
        u[..., sq] = u[..., sq] ** 2
        return u

    def to_external(self, u) -> np.ndarray:
        u = np.array(u, dtype=float)
        sq = np.array([k == "V2" for k, _ in self.labels])
        u[..., sq] = np.sqrt(u[..., sq])
        return u

    def as_dict(self) -> dict:
        return dict(name=self.name, case=str(self.case_ref) if self.case_ref else None,
                    controls=list(self.controls), u0=self.u0.tolist(), u1=self.u1.tolist(),
                    frozen_controls=dict(self.frozen), K=self.K, t=self.t.tolist(),
                    det_constraint=self.det_constraint, flow_limits=self.flow_limits,
                    angle_limits=self.angle_limits)


def _assignment(value, controls, what, scale):
    if isinstance(value, dict):
        extra = set(value) - set(controls)
        missing = set(controls) - set(value)
        if missing:
            raise ScenarioError(f"{what} lacks {', '.join(sorted(missing))}")
        named = {k: float(v) * (scale if k.startswith("P") else 1.0) for k, v in value.items()}
        return np.array([named[c] for c in controls]), {k: named[k] for k in extra}
    vals = np.asarray(value, dtype=float)
    if vals.shape != (len(controls),):
        raise ScenarioError(f"{what} needs {len(controls)} values")
    return np.array([v * (scale if c.startswith("P") else 1.0) for c, v in zip(controls, vals)]), {}


def scenario_from_dict(data: dict, base_dir=None, base_mva=100.0) -> Scenario:
    """Build a Scenario; ``base_mva`` converts MW entries when power_unit is MW."""
    unknown = set(data) - _KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    for key in ("u0", "u1"):
        if key not in data:
            raise ScenarioError(f"scenario lacks {key}")
    unit = str(data.get("power_unit", "pu")).lower()
    if unit not in ("pu", "mw"):
        raise ScenarioError("power_unit must be 'pu' or 'MW'")
    scale = 1.0 / base_mva if unit == "mw" else 1.0

    frozen_raw = data.get("frozen_controls", {}) or {}
    if isinstance(frozen_raw, list):
        frozen_names, frozen = list(frozen_raw), {}
    else:
        frozen_names = list(frozen_raw)
        frozen = {k: float(v) * (scale if k.startswith("P") else 1.0) for k, v in frozen_raw.items()}
    for k in frozen_names:
        parse_control_name(k)

    controls = data.get("controls")
    if controls is None:
        if not isinstance(data["u0"], dict):
            raise ScenarioError("list-valued u0 needs an explicit 'controls' list")
        controls = [c for c in data["u0"] if c not in frozen_names]
    controls = tuple(str(c) for c in controls)
    for c in controls:
        parse_control_name(c)
    u0, extra0 = _assignment(data["u0"], controls, "u0", scale)
    u1, extra1 = _assignment(data["u1"], controls, "u1", scale)
    for k in set(extra0) | set(extra1):
        if k not in frozen_names:
            raise ScenarioError(f"{k} is neither free nor frozen")
        if k not in extra0 or k not in extra1 or extra0[k] != extra1[k]:
            raise ScenarioError(f"frozen control {k} differs between u0 and u1")
        if k in frozen and frozen[k] != extra0[k]:
            raise ScenarioError(f"frozen control {k} disagrees with frozen_controls")
        frozen[k] = extra0[k]

    K = int(data.get("K", DEFAULT_K))
    spacing = data.get("spacing", "uniform")
    if isinstance(spacing, str):
        if spacing != "uniform":
            raise ScenarioError("spacing must be 'uniform' or a list of interior parameters")
        t = None
    else:
        inner = np.asarray(spacing, dtype=float)
        if "K" in data and inner.size != K:
            raise ScenarioError("explicit spacing length differs from K")
        K = inner.size
        if np.any(inner <= 0) or np.any(inner >= 1):
            raise ScenarioError("spacing must be strictly increasing inside (0, 1)")
        t = np.concatenate([[0.0], inner, [1.0]])

    case_ref = data.get("case")
    if case_ref is not None:
        case_ref = Path(case_ref)
        if base_dir is not None and not case_ref.is_absolute():
            case_ref = Path(base_dir) / case_ref
    return Scenario(case_ref=case_ref, controls=controls, u0=u0, u1=u1, frozen=frozen, K=K, t=t,
                    ipm=_params(IPMParams, data.get("ipm"), "ipm"),
                    homotopy=_params(HomotopyParams, data.get("homotopy"), "homotopy"),
                    det_constraint=bool(data.get("det_constraint", False)),
                    flow_limits=bool(data.get("flow_limits", True)),
                    angle_limits=bool(data.get("angle_limits", True)),
                    name=str(data.get("name", "")))


def load_scenario(path, base_mva=100.0) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    return scenario_from_dict(data, base_dir=path.parent, base_mva=base_mva)


@dataclass
class Problem:
    """Everything the homotopy needs, in model units."""

    scenario: Scenario
    case: NetworkCase
    cset: ConstraintSet
    cons: OPFPathConstraints
    u0: np.ndarray  # internal units
    u1: np.ndarray
    x0: np.ndarray
    x1: np.ndarray

    @property
    def t(self):
        return self.scenario.t

    @property
    def exempt(self):
        idx = np.flatnonzero(self.cset.groups == DET)
        return idx if idx.size else None


def build_problem(scenario: Scenario, case: NetworkCase | None = None, threads=1) -> Problem:
    """Assemble constraints and solve both endpoint power flows.

    Raises ScenarioError if a control does not exist in the case or an
    endpoint power flow fails.
    """
    if case is None:
        if scenario.case_ref is None:
            raise ScenarioError("scenario names no case file")
        case = load_case(scenario.case_ref)
    if case.needs_merge:
        case = merge_generators(case)
    model = build_quadratic_model(case)
    u_fixed = model.default_controls()
    try:
        free = [model.control_index(lab) for lab in scenario.labels]
        for name, val in scenario.frozen.items():
            kind, bus = parse_control_name(name)
            u_fixed[model.control_index((kind, bus))] = val ** 2 if kind == "V2" else val
    except ValueError as exc:
        raise ScenarioError(f"control not present in case: {exc}") from exc
    cset = ConstraintSet(model, free, u_fixed, flow_limits=scenario.flow_limits,
                         angle_limits=scenario.angle_limits,
                         det_constraint=scenario.det_constraint)
    u0 = scenario.to_internal(scenario.u0)
    u1 = scenario.to_internal(scenario.u1)
    try:
        x0 = cset.solve_state(u0, model.initial_state())
        x1 = cset.solve_state(u1, x0)
    except EvaluationError as exc:
        raise ScenarioError(f"endpoint power flow failed: {exc}") from exc
    P0 = u0 + scenario.t[1:-1, None] * (u1 - u0)
    try:
        cons = OPFPathConstraints.along(cset, P0, x0, threads=threads)
    except EvaluationError as exc:
        raise ScenarioError(f"power flow fails on the straight line: {exc}") from exc
    return Problem(scenario, case, cset, cons, u0, u1, x0, x1)
