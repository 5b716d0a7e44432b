"""Grid case ingestion and the quadratic rectangular-coordinate power-flow model.

Two input formats are accepted and produce identical :class:`NetworkCase`
objects: a subset of the MATPOWER ``mpc`` text format (``baseMVA``, ``bus``,
``gen`` and ``branch`` matrices) and a JSON mirror holding the same matrices
under the keys ``baseMVA``, ``bus``, ``gen`` and ``branch``.

All quantities are stored in per-unit on the system base; angles in radians.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Bus",
    "Branch",
    "Generator",
    "NetworkCase",
    "QuadForm",
    "FormBank",
    "QuadraticModel",
    "CaseError",
    "CaseSyntaxError",
    "CaseSemanticError",
    "parse_case",
    "parse_matpower",
    "parse_case_json",
    "load_case",
    "case_to_matpower",
    "case_to_json",
    "merge_generators",
    "build_quadratic_model",
]

SLACK, PV, PQ = "slack", "PV", "PQ"

# MATPOWER column counts (required prefix of each row)
_BUS_COLS, _GEN_COLS, _BRANCH_COLS = 13, 10, 11


class CaseError(ValueError):
    """Base class for case ingestion errors."""


class CaseSyntaxError(CaseError):
    def __init__(self, message, line, col):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class CaseSemanticError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    Pd: float
    Qd: float
    Gs: float
    Bs: float
    Vmin: float
    Vmax: float


@dataclass(frozen=True)
class Branch:
    f: int
    t: int
    r: float
    x: float
    b: float
    rate: float  # apparent power limit, p.u.; inf when unconstrained
    tap: float
    shift: float
    angmin: float | None = None
    angmax: float | None = None


@dataclass(frozen=True)
class Generator:
    bus: int
    Pg: float
    Qg: float
    Pmin: float
    Pmax: float
    Qmin: float
    Qmax: float
    Vset: float


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == SLACK)

    @property
    def needs_merge(self) -> bool:
        ids = [g.bus for g in self.generators]
        return len(ids) != len(set(ids))

    def generator_at(self, bus_id: int) -> Generator:
        gens = [g for g in self.generators if g.bus == bus_id]
        if len(gens) != 1:
            raise KeyError(f"bus {bus_id} hosts {len(gens)} generators")
        return gens[0]


# ----------------------------------------------------------------------------
# parsing


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == "'":
            in_str = not in_str
        elif ch == "%" and not in_str:
            return line[:i]
    return line


_ASSIGN = re.compile(r"\s*mpc\.(\w+)\s*=\s*")
_TOKEN = re.compile(r"[^\s,;]+")


def _parse_number(tok, line, col):
    low = tok.lower()
    if low in ("inf", "+inf"):
        return math.inf
    if low == "-inf":
        return -math.inf
    try:
        return float(tok)
    except ValueError:
        raise CaseSyntaxError(f"invalid number {tok!r}", line, col) from None


def parse_matpower(text: str) -> NetworkCase:
    """Parse the supported subset of the MATPOWER ``mpc`` text format."""
    lines = text.splitlines()
    fields: dict[str, object] = {}
    field_lines: dict[str, int] = {}
    warnings: list[str] = []
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i])
        i += 1
        if not raw.strip() or raw.strip().startswith("function"):
            continue
        m = _ASSIGN.match(raw)
        if not m:
            col = len(raw) - len(raw.lstrip()) + 1
            raise CaseSyntaxError("expected 'mpc.<name> = ...'", lineno, col)
        name = m.group(1)
        rest = raw[m.end():]
        start = rest.lstrip()
        if start.startswith("["):
            offset = m.end() + (len(rest) - len(start)) + 1
            rows: list[list[float]] = []
            current: list[float] = []
            seg, seg_line, seg_off = start[1:], lineno, offset
            while True:
                end = seg.find("]")
                body = seg if end < 0 else seg[:end]
                pieces = body.split(";")
                pos = 0
                for k, part in enumerate(pieces):
                    for tm in _TOKEN.finditer(part):
                        current.append(
                            _parse_number(tm.group(), seg_line, seg_off + pos + tm.start() + 1)
                        )
                    pos += len(part) + 1
                    if k < len(pieces) - 1 and current:
                        rows.append(current)
                        current = []
                if end >= 0:
                    tail = seg[end + 1:].strip()
                    if tail not in ("", ";"):
                        raise CaseSyntaxError(
                            f"unexpected text after ']': {tail!r}", seg_line, seg_off + end + 2
                        )
                    break
                # newline terminates a row as in MATLAB
                if current:
                    rows.append(current)
                current = []
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix 'mpc.{name}'", lineno, offset)
                seg, seg_line, seg_off = _strip_comment(lines[i]), i + 1, 0
                i += 1
            if current:
                rows.append(current)
            fields[name] = rows
            field_lines[name] = lineno
        elif start.startswith("{"):
            depth = start.count("{") - start.count("}")
            while depth > 0:
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated cell array 'mpc.{name}'", lineno, 1)
                seg = _strip_comment(lines[i])
                depth += seg.count("{") - seg.count("}")
                i += 1
            warnings.append(f"ignored unsupported field mpc.{name}")
        else:
            value = start.strip().rstrip(";").strip()
            if value.startswith("'"):
                fields[name] = value.strip("'")
            else:
                col = m.end() + (len(rest) - len(start)) + 1
                fields[name] = _parse_number(value, lineno, col)
            field_lines[name] = lineno
    for name in ("baseMVA", "bus", "gen", "branch"):
        if name not in fields:
            raise CaseSemanticError(f"missing required field mpc.{name}")
    for name in fields:
        if name not in ("baseMVA", "bus", "gen", "branch", "version"):
            warnings.append(f"ignored unsupported field mpc.{name}")
    return _build_case(
        fields["baseMVA"], fields["bus"], fields["gen"], fields["branch"], warnings, field_lines
    )


def parse_case_json(text: str) -> NetworkCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    for name in ("baseMVA", "bus", "gen", "branch"):
        if name not in data:
            raise CaseSemanticError(f"missing required key {name!r}")
    warnings = [f"ignored unsupported key {k!r}" for k in data if k not in ("baseMVA", "bus", "gen", "branch", "version")]
    mats = {}
    for name in ("bus", "gen", "branch"):
        try:
            mats[name] = [[float(v) for v in row] for row in data[name]]
        except (TypeError, ValueError):
            raise CaseSemanticError(f"non-numeric entry in {name!r}") from None
    return _build_case(float(data["baseMVA"]), mats["bus"], mats["gen"], mats["branch"], warnings, {})


def parse_case(text: str) -> NetworkCase:
    """Parse case text, auto-detecting the JSON mirror by a leading '{'."""
    if text.lstrip().startswith("{"):
        return parse_case_json(text)
    return parse_matpower(text)


def load_case(path) -> NetworkCase:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def _check_cols(rows, ncols, name, field_lines):
    for k, row in enumerate(rows):
        if len(row) < ncols:
            where = f" (matrix starting at line {field_lines[name]})" if name in field_lines else ""
            raise CaseSemanticError(
                f"{name} row {k + 1} has {len(row)} columns, need at least {ncols}{where}"
            )


def _angle_limit(value_deg, lower):
    """Return an angle-difference limit in radians, or None when inactive."""
    if value_deg == 0 or (lower and value_deg <= -360) or (not lower and value_deg >= 360):
        return None
    if abs(value_deg) >= 90:
        raise CaseSemanticError(
            f"angle difference limit {value_deg} deg outside (-90, 90) is not supported"
        )
    return math.radians(value_deg)


def _build_case(base_mva, bus_rows, gen_rows, branch_rows, warnings, field_lines):
    base = float(base_mva)
    if not base > 0:
        raise CaseSemanticError("baseMVA must be positive")
    _check_cols(bus_rows, _BUS_COLS, "bus", field_lines)
    _check_cols(gen_rows, _GEN_COLS, "gen", field_lines)
    _check_cols(branch_rows, _BRANCH_COLS, "branch", field_lines)

    gens = []
    for row in gen_rows:
        if row[7] <= 0:
            warnings.append(f"dropped out-of-service generator at bus {int(row[0])}")
            continue
        gens.append(
            Generator(
                bus=int(row[0]), Pg=row[1] / base, Qg=row[2] / base,
                Qmax=row[3] / base, Qmin=row[4] / base, Vset=row[5],
                Pmax=row[8] / base, Pmin=row[9] / base,
            )
        )
    gen_buses = {g.bus for g in gens}

    buses = []
    seen = set()
    for row in bus_rows:
        bid = int(row[0])
        if bid in seen:
            raise CaseSemanticError(f"duplicate bus id {bid}")
        seen.add(bid)
        btype = int(row[1])
        if btype == 3:
            kind = SLACK
        elif btype in (1, 2):
            kind = PV if bid in gen_buses else PQ
            if btype == 2 and bid not in gen_buses:
                warnings.append(f"bus {bid} is type PV without generator; treated as PQ")
            elif btype == 1 and bid in gen_buses:
                warnings.append(f"bus {bid} is type PQ but hosts a generator; treated as PV")
        else:
            raise CaseSemanticError(f"bus {bid}: unsupported bus type {btype}")
        buses.append(
            Bus(id=bid, kind=kind, Pd=row[2] / base, Qd=row[3] / base,
                Gs=row[4] / base, Bs=row[5] / base, Vmax=row[11], Vmin=row[12])
        )

    branches = []
    for row in branch_rows:
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in seen:
                raise CaseSemanticError(f"branch {f}-{t} references unknown bus {end}")
        if row[10] <= 0:
            warnings.append(f"dropped out-of-service branch {f}-{t}")
            continue
        angmin = _angle_limit(row[11], True) if len(row) > 11 else None
        angmax = _angle_limit(row[12], False) if len(row) > 12 else None
        branches.append(
            Branch(f=f, t=t, r=row[2], x=row[3], b=row[4],
                   rate=row[5] / base if row[5] > 0 else math.inf,
                   tap=row[8] if row[8] != 0 else 1.0, shift=math.radians(row[9]),
                   angmin=angmin, angmax=angmax)
        )
    for g in gens:
        if g.bus not in seen:
            raise CaseSemanticError(f"generator references unknown bus {g.bus}")

    case = NetworkCase(base, tuple(buses), tuple(branches), tuple(gens), tuple(warnings))
    _validate(case)
    return case


def _validate(case: NetworkCase) -> None:
    slacks = [b for b in case.buses if b.kind == SLACK]
    if len(slacks) != 1:
        raise CaseSemanticError(f"expected exactly one slack bus, found {len(slacks)}")
    if slacks[0].id not in {g.bus for g in case.generators}:
        raise CaseSemanticError(f"slack bus {slacks[0].id} has no generator")
    for b in case.buses:
        if b.Vmin > b.Vmax:
            raise CaseSemanticError(f"bus {b.id}: Vmin > Vmax")
    for g in case.generators:
        if g.Pmin > g.Pmax or g.Qmin > g.Qmax:
            raise CaseSemanticError(f"generator at bus {g.bus}: inverted limits")
    idx = case.bus_index
    n = case.n
    rows = [idx[br.f] for br in case.branches]
    cols = [idx[br.t] for br in case.branches]
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise CaseSemanticError(f"bus graph is not connected ({ncomp} components)")


# ----------------------------------------------------------------------------
# writing


def _fmt(v):
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return repr(float(v))


def _case_matrices(case: NetworkCase):
    base = case.base_mva
    kinds = {SLACK: 3, PV: 2, PQ: 1}
    bus = [[b.id, kinds[b.kind], b.Pd * base, b.Qd * base, b.Gs * base, b.Bs * base,
            1, 1.0, 0.0, 0.0, 1, b.Vmax, b.Vmin] for b in case.buses]
    gen = [[g.bus, g.Pg * base, g.Qg * base, g.Qmax * base, g.Qmin * base, g.Vset,
            base, 1, g.Pmax * base, g.Pmin * base] for g in case.generators]
    branch = []
    for br in case.branches:
        branch.append([
            br.f, br.t, br.r, br.x, br.b, 0.0 if math.isinf(br.rate) else br.rate * base,
            0.0, 0.0, br.tap, math.degrees(br.shift), 1,
            -360.0 if br.angmin is None else math.degrees(br.angmin),
            360.0 if br.angmax is None else math.degrees(br.angmax),
        ])
    return bus, gen, branch


def case_to_matpower(case: NetworkCase) -> str:
    bus, gen, branch = _case_matrices(case)
    out = ["function mpc = exported", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.base_mva)};"]
    for name, rows in (("bus", bus), ("gen", gen), ("branch", branch)):
        out.append(f"mpc.{name} = [")
        out.extend("\t" + "\t".join(_fmt(v) for v in row) + ";" for row in rows)
        out.append("];")
    return "\n".join(out) + "\n"


def case_to_json(case: NetworkCase) -> str:
    bus, gen, branch = _case_matrices(case)
    return json.dumps({"baseMVA": case.base_mva, "bus": bus, "gen": gen, "branch": branch}, indent=1)


# ----------------------------------------------------------------------------
# normalization


def merge_generators(case: NetworkCase) -> NetworkCase:
    """Replace co-located generators by one equivalent unit per bus.

    Limits and set-points add up; voltage set-points must agree.
    """
    if not case.needs_merge:
        return case
    merged: dict[int, Generator] = {}
    for g in case.generators:
        prev = merged.get(g.bus)
        if prev is None:
            merged[g.bus] = g
            continue
        if abs(prev.Vset - g.Vset) > 1e-12:
            raise CaseSemanticError(
                f"conflicting voltage set-points {prev.Vset} and {g.Vset} at bus {g.bus}"
            )
        merged[g.bus] = Generator(
            bus=g.bus, Pg=prev.Pg + g.Pg, Qg=prev.Qg + g.Qg,
            Pmin=prev.Pmin + g.Pmin, Pmax=prev.Pmax + g.Pmax,
            Qmin=prev.Qmin + g.Qmin, Qmax=prev.Qmax + g.Qmax, Vset=g.Vset,
        )
    return replace(case, generators=tuple(merged.values()))


# ----------------------------------------------------------------------------
# quadratic model


@dataclass(frozen=True)
class QuadForm:
    """q(x) = 0.5 x'Ax + b'x + c with symmetric sparse A."""

    A: sp.csr_matrix
    b: np.ndarray
    c: float = 0.0

    def value(self, x):
        return 0.5 * x @ (self.A @ x) + self.b @ x + self.c

    def grad(self, x):
        return self.A @ x + self.b

    def shifted(self, c):
        return QuadForm(self.A, self.b, self.c + c)

    def scaled(self, s):
        return QuadForm(self.A * s, self.b * s, self.c * s)


class FormBank:
    """A stack of quadratic forms evaluated together."""

    def __init__(self, forms, dim):
        self.dim = N = dim
        self.size = len(forms)
        if forms:
            self.A_stack = sp.vstack([q.A for q in forms], format="csr")
            flat = [q.A.tocoo() for q in forms]
            rows = np.concatenate([np.full(a.nnz, k) for k, a in enumerate(flat)])
            cols = np.concatenate([a.row * N + a.col for a in flat])
            vals = np.concatenate([a.data for a in flat])
            self.A_flat = sp.csr_matrix((vals, (rows, cols)), shape=(len(forms), N * N))
            self.B = np.array([q.b for q in forms], dtype=float)
            self.c = np.array([q.c for q in forms], dtype=float)
        else:
            self.A_stack = sp.csr_matrix((0, N))
            self.A_flat = sp.csr_matrix((0, N * N))
            self.B = np.zeros((0, N))
            self.c = np.zeros(0)

    def products(self, x):
        """Rows A_k x, as a (size, dim) array."""
        return (self.A_stack @ x).reshape(self.size, self.dim)

    def values(self, x):
        Ax = self.products(x)
        return 0.5 * Ax @ x + self.B @ x + self.c

    def values_and_grads(self, x):
        Ax = self.products(x)
        return 0.5 * Ax @ x + self.B @ x + self.c, Ax + self.B

    def weighted_hessian(self, weights):
        """Dense sum_k weights[k] A_k."""
        return np.asarray(self.A_flat.T @ weights).reshape(self.dim, self.dim)

    def form(self, k) -> QuadForm:
        N = self.dim
        return QuadForm(self.A_stack[k * N:(k + 1) * N].tocsr(), self.B[k].copy(), float(self.c[k]))


def _sym(n2, entries):
    """Symmetric sparse matrix M + M' from (row, col, val) triples of M."""
    if not entries:
        return sp.csr_matrix((n2, n2))
    r, c, v = map(np.asarray, zip(*entries))
    m = sp.coo_matrix((v, (r, c)), shape=(n2, n2)).tocsr()
    return (m + m.T).tocsr()


def complex_power_forms(n, a, terms):
    """Forms (P, Q) of S = V_a * conj(sum_c y_c V_c), x = [Re V; Im V]."""
    alpha, beta = [], []  # Re I = alpha'x, Im I = beta'x
    for c, y in terms:
        g, b = y.real, y.imag
        alpha += [(c, g), (n + c, -b)]
        beta += [(c, b), (n + c, g)]
    ea, fa = a, n + a
    mp = [(ea, k, v) for k, v in alpha] + [(fa, k, v) for k, v in beta]
    mq = [(fa, k, v) for k, v in alpha] + [(ea, k, -v) for k, v in beta]
    zero = np.zeros(2 * n)
    return QuadForm(_sym(2 * n, mp), zero), QuadForm(_sym(2 * n, mq), zero.copy())


def voltage_square_form(n, i):
    """|V_i|^2 = e_i^2 + f_i^2."""
    return QuadForm(_sym(2 * n, [(i, i, 1.0), (n + i, n + i, 1.0)]), np.zeros(2 * n))


def branch_admittances(br: Branch):
    """Pi-model (Yff, Yft, Ytf, Ytt) with off-nominal tap and phase shift."""
    ys = 1.0 / complex(br.r, br.x)
    tap = br.tap * np.exp(1j * br.shift)
    ytt = ys + 0.5j * br.b
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def admittance_matrix(case: NetworkCase) -> sp.csr_matrix:
    idx = case.bus_index
    n = case.n
    rows, cols, vals = [], [], []
    for br in case.branches:
        f, t = idx[br.f], idx[br.t]
        yff, yft, ytf, ytt = branch_admittances(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    for i, b in enumerate(case.buses):
        rows.append(i)
        cols.append(i)
        vals.append(complex(b.Gs, b.Bs))
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()


@dataclass(frozen=True)
class QuadraticModel:
    """f_k(x, u) = 0.5 x'H_k x + r_k'x + c_k - [u]_k over 2n equations.

    ``control_eq[j]`` names the equation that receives control entry ``u[j]``;
    controls are labelled ``("P", bus_id)`` (active injection of a PV unit)
    or ``("V2", bus_id)`` (squared voltage magnitude of a generator bus).
    """

    case: NetworkCase
    equations: FormBank
    control_eq: np.ndarray
    control_labels: tuple
    p_inj: tuple  # QuadForm per bus, injected active power (loads excluded)
    q_inj: tuple

    @property
    def n(self):
        return self.case.n

    @property
    def g(self):
        return len(self.case.generators)

    @property
    def dim(self):
        return 2 * self.case.n

    @property
    def n_controls(self):
        return len(self.control_labels)

    def H(self, k) -> sp.csr_matrix:
        N = self.dim
        return self.equations.A_stack[k * N:(k + 1) * N]

    @property
    def J0(self) -> np.ndarray:
        return self.equations.B

    def Jk(self, k) -> np.ndarray:
        """Constant matrix J_k with J(x) = J0 + sum_k J_k x_k; row l is row k of H_l."""
        N = self.dim
        cols = self.equations.A_flat[:, k * N:(k + 1) * N]
        return cols.toarray()

    def control_selector(self) -> np.ndarray:
        """-df/du: ones at (control_eq[j], j)."""
        S = np.zeros((self.dim, self.n_controls))
        S[self.control_eq, np.arange(self.n_controls)] = 1.0
        return S

    def f(self, x, u):
        out = self.equations.values(x)
        out[self.control_eq] -= u
        return out

    def jacobian(self, x):
        return self.equations.products(x) + self.equations.B

    def jacobian_linear_part(self, v):
        """sum_k J_k v_k."""
        return self.equations.products(v)

    def control_index(self, label) -> int:
        return self.control_labels.index(tuple(label))

    def initial_state(self) -> np.ndarray:
        """Flat start at generator set-points: e = V (or 1), f = 0."""
        x = np.zeros(self.dim)
        x[: self.n] = 1.0
        idx = self.case.bus_index
        for g in self.case.generators:
            x[idx[g.bus]] = g.Vset
        return x

    def default_controls(self) -> np.ndarray:
        u = np.zeros(self.n_controls)
        for j, (kind, bus) in enumerate(self.control_labels):
            gen = self.case.generator_at(bus)
            u[j] = gen.Pg if kind == "P" else gen.Vset ** 2
        return u


def build_quadratic_model(case: NetworkCase) -> QuadraticModel:
    if case.needs_merge:
        raise CaseSemanticError("case has co-located generators; call merge_generators first")
    n = case.n
    N = 2 * n
    Y = admittance_matrix(case).tocsr()
    p_inj, q_inj = [], []
    for i in range(n):
        row = Y.getrow(i).tocoo()
        P, Q = complex_power_forms(n, i, list(zip(row.col, row.data)))
        p_inj.append(P)
        q_inj.append(Q)

    forms: list = [None] * N
    control_eq, labels = [], []
    for i, bus in enumerate(case.buses):
        if bus.kind == SLACK:
            forms[i] = voltage_square_form(n, i)
            control_eq.append(i)
            labels.append(("V2", bus.id))
            e = np.zeros(N)
            e[n + i] = 1.0
            forms[n + i] = QuadForm(sp.csr_matrix((N, N)), e)
        elif bus.kind == PV:
            forms[i] = p_inj[i].shifted(bus.Pd)
            forms[n + i] = voltage_square_form(n, i)
            control_eq += [i, n + i]
            labels += [("P", bus.id), ("V2", bus.id)]
        else:
            forms[i] = p_inj[i].shifted(bus.Pd)
            forms[n + i] = q_inj[i].shifted(bus.Qd)
    return QuadraticModel(
        case=case,
        equations=FormBank(forms, N),
        control_eq=np.array(control_eq, dtype=int),
        control_labels=tuple(labels),
        p_inj=tuple(p_inj),
        q_inj=tuple(q_inj),
    )
