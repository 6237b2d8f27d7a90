"""MATPOWER-style network cases: parsing, validation, dense indexing.

Element dataclasses keep the source units of the case file (MW, MVAr, degrees)
so a case round-trips losslessly.  All numerical code works on the per-unit
arrays exposed by :class:`Network` (``net.pd``, ``net.rate``, ...), which only
cover in-service elements on non-isolated buses.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Base class for case loading problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseValidationError(CaseError):
    """Structurally valid document describing an unusable network.

    ``kind`` is a short machine-readable tag such as ``"unknown bus reference"``
    or ``"multiple slack"``.
    """

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3
    ISOLATED = 4


@dataclass(frozen=True)
class CostPoly:
    """Quadratic generator cost, MW based: c2*P^2 + c1*P + c0 in $/h."""

    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0
    startup: float = 0.0
    shutdown: float = 0.0

    def __call__(self, p_mw):
        return self.c2 * p_mw * p_mw + self.c1 * p_mw + self.c0


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float  # MW
    q_load: float  # MVAr
    g_shunt: float  # MW at 1 pu
    b_shunt: float  # MVAr at 1 pu
    area: int = 1
    v_init: float = 1.0
    theta_init: float = 0.0  # degrees, as in the case file
    base_kv: float = 0.0
    zone: int = 1
    v_max: float = 1.1
    v_min: float = 0.9


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float  # MW, case-file dispatch
    q_gen: float
    q_max: float
    q_min: float
    v_setpoint: float
    m_base: float
    status: int
    p_max: float
    p_min: float
    cost: CostPoly = field(default_factory=CostPoly)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x0: float
    b: float
    s_rate: float  # MVA, 0 = unlimited
    rate_b: float = 0.0
    rate_c: float = 0.0
    tap: float = 0.0  # as in the file; 0 means no transformer
    shift: float = 0.0  # degrees
    status: int = 1
    ang_min: float = -360.0
    ang_max: float = 360.0

    @property
    def tau(self) -> float:
        return self.tap if self.tap != 0.0 else 1.0


@dataclass(frozen=True, eq=False)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    name: str = "case"

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.base_mva == other.base_mva
            and self.buses == other.buses
            and self.branches == other.branches
            and self.generators == other.generators
        )

    __hash__ = None

    # -- dense indexing ---------------------------------------------------

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind != BusKind.ISOLATED], dtype=int)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {int(i): k for k, i in enumerate(self.bus_ids)}

    @cached_property
    def _active_buses(self) -> list[Bus]:
        return [b for b in self.buses if b.kind != BusKind.ISOLATED]

    @cached_property
    def branch_positions(self) -> np.ndarray:
        """Positions in ``branches`` of the in-service branches (dense order)."""
        return np.array([k for k, br in enumerate(self.branches) if br.status > 0], dtype=int)

    @cached_property
    def gen_positions(self) -> np.ndarray:
        return np.array([k for k, g in enumerate(self.generators) if g.status > 0], dtype=int)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.branch_positions)

    @property
    def n_gen(self) -> int:
        return len(self.gen_positions)

    # -- per-unit bus data --------------------------------------------------

    def _bus_array(self, attr, scale=1.0):
        return np.array([getattr(b, attr) for b in self._active_buses], dtype=float) * scale

    @cached_property
    def pd(self) -> np.ndarray:
        return self._bus_array("p_load") / self.base_mva

    @cached_property
    def qd(self) -> np.ndarray:
        return self._bus_array("q_load") / self.base_mva

    @cached_property
    def gs(self) -> np.ndarray:
        return self._bus_array("g_shunt") / self.base_mva

    @cached_property
    def bs(self) -> np.ndarray:
        return self._bus_array("b_shunt") / self.base_mva

    @cached_property
    def vmin(self) -> np.ndarray:
        return self._bus_array("v_min")

    @cached_property
    def vmax(self) -> np.ndarray:
        return self._bus_array("v_max")

    @cached_property
    def base_kv(self) -> np.ndarray:
        return self._bus_array("base_kv")

    @cached_property
    def bus_kind(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self._active_buses], dtype=int)

    @cached_property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_kind == BusKind.SLACK)[0])

    @cached_property
    def pv_buses(self) -> np.ndarray:
        """Non-slack buses holding at least one in-service generator."""
        has_gen = np.zeros(self.n_bus, dtype=bool)
        has_gen[self.gen_bus] = True
        has_gen[self.slack] = False
        return np.flatnonzero(has_gen)

    @cached_property
    def pq_buses(self) -> np.ndarray:
        mask = np.ones(self.n_bus, dtype=bool)
        mask[self.pv_buses] = False
        mask[self.slack] = False
        return np.flatnonzero(mask)

    @cached_property
    def gen_buses(self) -> np.ndarray:
        """Sorted dense indices of buses that carry an in-service generator."""
        return np.unique(self.gen_bus)

    # -- per-unit branch data -----------------------------------------------

    def _br(self):
        return [self.branches[k] for k in self.branch_positions]

    @cached_property
    def f(self) -> np.ndarray:
        return np.array([self.bus_index[b.from_bus] for b in self._br()], dtype=int)

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([self.bus_index[b.to_bus] for b in self._br()], dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([b.r for b in self._br()], dtype=float)

    @cached_property
    def x0(self) -> np.ndarray:
        return np.array([b.x0 for b in self._br()], dtype=float)

    @cached_property
    def b(self) -> np.ndarray:
        return np.array([b.b for b in self._br()], dtype=float)

    @cached_property
    def tau(self) -> np.ndarray:
        return np.array([b.tau for b in self._br()], dtype=float)

    @cached_property
    def shift(self) -> np.ndarray:
        return np.deg2rad(np.array([b.shift for b in self._br()], dtype=float))

    @cached_property
    def rate(self) -> np.ndarray:
        """Apparent-power limits in pu; ``inf`` where the file says 0."""
        rate = np.array([b.s_rate for b in self._br()], dtype=float) / self.base_mva
        return np.where(rate > 0, rate, np.inf)

    @cached_property
    def z_base(self) -> np.ndarray:
        """Base impedance in Ohm per in-service branch (from-bus kV); 1 when kV unknown."""
        kv = self.base_kv[self.f]
        return np.where(kv > 0, kv**2 / self.base_mva, 1.0)

    # -- per-unit generator data --------------------------------------------

    def _gens(self):
        return [self.generators[k] for k in self.gen_positions]

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self._gens()], dtype=int)

    def _gen_array(self, attr, scale=1.0):
        return np.array([getattr(g, attr) for g in self._gens()], dtype=float) * scale

    @cached_property
    def pmin(self) -> np.ndarray:
        return self._gen_array("p_min") / self.base_mva

    @cached_property
    def pmax(self) -> np.ndarray:
        return self._gen_array("p_max") / self.base_mva

    @cached_property
    def qmin(self) -> np.ndarray:
        return self._gen_array("q_min") / self.base_mva

    @cached_property
    def qmax(self) -> np.ndarray:
        return self._gen_array("q_max") / self.base_mva

    @cached_property
    def pg0(self) -> np.ndarray:
        return self._gen_array("p_gen") / self.base_mva

    @cached_property
    def qg0(self) -> np.ndarray:
        return self._gen_array("q_gen") / self.base_mva

    @cached_property
    def vset(self) -> np.ndarray:
        return self._gen_array("v_setpoint")

    @cached_property
    def cost_coeffs(self) -> np.ndarray:
        """(n_gen, 3) array of (c2, c1, c0) in MW-based $/h units."""
        return np.array([(g.cost.c2, g.cost.c1, g.cost.c0) for g in self._gens()], dtype=float).reshape(-1, 3)

    @cached_property
    def gen_incidence(self) -> sp.csr_matrix:
        """Bus-by-generator 0/1 matrix aggregating generator output per bus."""
        ng = self.n_gen
        return sp.csr_matrix((np.ones(ng), (self.gen_bus, np.arange(ng))), shape=(self.n_bus, ng))

    # -- helpers --------------------------------------------------------------

    def gen_cost(self, p_gen_pu: np.ndarray) -> np.ndarray:
        """$/h per generator for a per-unit dispatch."""
        p = np.asarray(p_gen_pu) * self.base_mva
        c = self.cost_coeffs
        return c[:, 0] * p * p + c[:, 1] * p + c[:, 2]

    def total_cost(self, p_gen_pu: np.ndarray) -> float:
        return float(np.sum(self.gen_cost(p_gen_pu)))

    def branch_label(self, k: int) -> str:
        br = self.branches[self.branch_positions[k]]
        return f"{br.from_bus}-{br.to_bus}"


# ---------------------------------------------------------------------------
# parsing

_BUS_COLS = 13
_GEN_COLS = 10
_BRANCH_COLS = 13


def _matrix_rows(rows, ncols, name, minimum=None):
    minimum = ncols if minimum is None else minimum
    out = []
    for k, row in enumerate(rows):
        if len(row) < minimum:
            raise CaseValidationError("malformed table", f"{name} row {k + 1} has {len(row)} columns, need {minimum}")
        out.append([float(v) for v in row])
    return out


def _build(base_mva, bus_rows, gen_rows, branch_rows, gencost_rows, name="case") -> Network:
    bus_rows = _matrix_rows(bus_rows, _BUS_COLS, "bus")
    gen_rows = _matrix_rows(gen_rows, _GEN_COLS, "gen")
    branch_rows = _matrix_rows(branch_rows, _BRANCH_COLS, "branch", minimum=11)
    if base_mva is None or not base_mva > 0:
        raise CaseValidationError("invalid base_mva", repr(base_mva))

    buses = []
    for row in bus_rows:
        kind = int(row[1])
        if kind not in (1, 2, 3, 4):
            raise CaseValidationError("invalid bus type", f"bus {int(row[0])} has type {kind}")
        buses.append(
            Bus(
                id=int(row[0]), kind=BusKind(kind), p_load=row[2], q_load=row[3], g_shunt=row[4],
                b_shunt=row[5], area=int(row[6]), v_init=row[7], theta_init=row[8], base_kv=row[9],
                zone=int(row[10]), v_max=row[11], v_min=row[12],
            )
        )

    costs = []
    for k, row in enumerate(gencost_rows[: len(gen_rows)]):
        model, n = int(row[0]), int(row[3])
        if model != 2:
            raise CaseValidationError("unsupported cost model", f"gencost row {k + 1} uses model {model}")
        coeffs = list(row[4 : 4 + n])
        if len(coeffs) != n or n > 3:
            raise CaseValidationError("unsupported cost model", f"gencost row {k + 1}: need a polynomial of degree <= 2")
        coeffs = [0.0] * (3 - n) + coeffs
        costs.append(CostPoly(c2=coeffs[0], c1=coeffs[1], c0=coeffs[2], startup=row[1], shutdown=row[2]))
    if gencost_rows and len(costs) < len(gen_rows):
        raise CaseValidationError("malformed table", "fewer gencost rows than generators")
    costs += [CostPoly()] * (len(gen_rows) - len(costs))

    gens = [
        Generator(
            bus=int(row[0]), p_gen=row[1], q_gen=row[2], q_max=row[3], q_min=row[4], v_setpoint=row[5],
            m_base=row[6], status=int(row[7]), p_max=row[8], p_min=row[9], cost=cost,
        )
        for row, cost in zip(gen_rows, costs)
    ]
    branches = []
    for row in branch_rows:
        row = row + [-360.0, 360.0][len(row) - 11 :] if len(row) < 13 else row
        branches.append(
            Branch(
                from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x0=row[3], b=row[4], s_rate=row[5],
                rate_b=row[6], rate_c=row[7], tap=row[8], shift=row[9], status=int(row[10]),
                ang_min=row[11], ang_max=row[12],
            )
        )
    net = Network(float(base_mva), tuple(buses), tuple(branches), tuple(gens), name=name)
    validate(net)
    return net


def validate(net: Network) -> None:
    """Raise :class:`CaseValidationError` if ``net`` violates a structural invariant."""
    if not net.buses:
        raise CaseValidationError("empty case", "no buses")
    ids = [b.id for b in net.buses]
    seen = set()
    for i in ids:
        if i in seen:
            raise CaseValidationError("duplicate bus id", str(i))
        seen.add(i)
    kinds = {b.id: b.kind for b in net.buses}
    for b in net.buses:
        if not (b.v_min > 0 and b.v_min <= b.v_max):
            raise CaseValidationError("invalid voltage limits", f"bus {b.id}")
    for k, br in enumerate(net.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in kinds:
                raise CaseValidationError("unknown bus reference", f"branch {k + 1} refers to bus {end}")
        if br.status > 0:
            if kinds[br.from_bus] == BusKind.ISOLATED or kinds[br.to_bus] == BusKind.ISOLATED:
                raise CaseValidationError("isolated bus in service", f"branch {k + 1}")
            if br.x0 == 0.0:
                raise CaseValidationError("zero reactance", f"branch {k + 1} ({br.from_bus}-{br.to_bus})")
            if br.tau <= 0:
                raise CaseValidationError("invalid tap ratio", f"branch {k + 1}")
    for k, g in enumerate(net.generators):
        if g.bus not in kinds:
            raise CaseValidationError("unknown bus reference", f"generator {k + 1} refers to bus {g.bus}")
        if g.status > 0:
            if kinds[g.bus] == BusKind.ISOLATED:
                raise CaseValidationError("generator on isolated bus", f"generator {k + 1}")
            if g.p_min > g.p_max or g.q_min > g.q_max:
                raise CaseValidationError("invalid generator limits", f"generator {k + 1}")
            if g.cost.c2 < 0:
                raise CaseValidationError("non-convex cost", f"generator {k + 1}")

    n = net.n_bus
    if n == 0:
        raise CaseValidationError("empty case", "every bus is isolated")
    slack = np.flatnonzero(net.bus_kind == BusKind.SLACK)
    if len(slack) == 0:
        raise CaseValidationError("no slack bus")
    adj = sp.coo_matrix((np.ones(net.n_branch), (net.f, net.t)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        per_comp = np.bincount(labels[slack], minlength=ncomp)
        if np.any(per_comp > 1):
            raise CaseValidationError("multiple slack", "more than one slack bus in one island")
        raise CaseValidationError("disconnected grid", f"{ncomp} islands among in-service branches")
    if len(slack) > 1:
        raise CaseValidationError("multiple slack", ", ".join(str(i) for i in net.bus_ids[slack]))


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[\]\n]+);")
_NUMBER_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?[Ii]nf")


def _line_col(text, pos):
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _strip_comments(text):
    # keep offsets intact so diagnostics point into the original document
    return re.sub(r"%[^\n]*", lambda m: " " * len(m.group(0)), text)


def _parse_m(text: str, name: str) -> Network:
    clean = _strip_comments(text)
    scalars, matrices = {}, {}
    for m in _SCALAR_RE.finditer(clean):
        key, val = m.group(1), m.group(2).strip()
        if key == "version":
            continue
        try:
            scalars[key] = float(val)
        except ValueError:
            line, col = _line_col(text, m.start(2))
            raise CaseSyntaxError(f"expected a number for mpc.{key}, got {val!r}", line, col) from None
    for m in _MATRIX_RE.finditer(clean):
        key = m.group(1)
        end = clean.find("]", m.end())
        if end < 0:
            line, col = _line_col(text, m.start())
            raise CaseSyntaxError(f"unterminated matrix mpc.{key}", line, col)
        body_start = m.end()
        rows, row = [], []
        pos = body_start
        for tok in re.finditer(r"[^\s,;]+|;|\n", clean[body_start:end]):
            s = tok.group(0)
            p = body_start + tok.start()
            if s in (";", "\n"):
                if row:
                    rows.append(row)
                    row = []
                continue
            if not _NUMBER_RE.fullmatch(s):
                line, col = _line_col(text, p)
                raise CaseSyntaxError(f"unexpected token {s!r} in mpc.{key}", line, col)
            row.append(float(s))
            pos = p
        if row:
            rows.append(row)
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            line, col = _line_col(text, pos)
            raise CaseSyntaxError(f"rows of mpc.{key} have inconsistent lengths {sorted(widths)}", line, col)
        matrices[key] = rows
    for key in ("bus", "gen", "branch"):
        if key not in matrices:
            raise CaseSyntaxError(f"missing matrix mpc.{key}", 1, 1)
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing mpc.baseMVA", 1, 1)
    return _build(
        scalars["baseMVA"], matrices["bus"], matrices["gen"], matrices["branch"], matrices.get("gencost", []), name
    )


def parse_case(text: str, name: str = "case") -> Network:
    """Parse a case from the JSON mirror format or a MATPOWER ``.m`` subset."""
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
        if not isinstance(doc, dict):
            raise CaseSyntaxError("top-level JSON value must be an object", 1, 1)
        for key in ("base_mva", "bus", "gen", "branch"):
            if key not in doc:
                raise CaseValidationError("missing key", key)
        return _build(
            doc["base_mva"], doc["bus"], doc["gen"], doc["branch"], doc.get("gencost", []), doc.get("name", name)
        )
    return _parse_m(text, name)


def load_case(path) -> Network:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def to_json_dict(net: Network) -> dict:
    """Serialize to the canonical JSON mirror (MATPOWER columns and units)."""
    bus = [
        [b.id, int(b.kind), b.p_load, b.q_load, b.g_shunt, b.b_shunt, b.area, b.v_init, b.theta_init,
         b.base_kv, b.zone, b.v_max, b.v_min]
        for b in net.buses
    ]
    gen = [
        [g.bus, g.p_gen, g.q_gen, g.q_max, g.q_min, g.v_setpoint, g.m_base, g.status, g.p_max, g.p_min]
        for g in net.generators
    ]
    branch = [
        [br.from_bus, br.to_bus, br.r, br.x0, br.b, br.s_rate, br.rate_b, br.rate_c, br.tap, br.shift,
         br.status, br.ang_min, br.ang_max]
        for br in net.branches
    ]
    gencost = [[2, g.cost.startup, g.cost.shutdown, 3, g.cost.c2, g.cost.c1, g.cost.c0] for g in net.generators]
    return {"name": net.name, "base_mva": net.base_mva, "bus": bus, "gen": gen, "branch": branch, "gencost": gencost}


def serialize_case(net: Network) -> str:
    return json.dumps(to_json_dict(net), indent=1)


def scale_loads(net: Network, factor: float) -> Network:
    """Multiply every bus load (P and Q) by ``factor``."""
    if not factor > 0 or not math.isfinite(factor):
        raise ValueError("factor must be positive")
    buses = tuple(replace(b, p_load=b.p_load * factor, q_load=b.q_load * factor) for b in net.buses)
    return Network(net.base_mva, buses, net.branches, net.generators, name=net.name)


def bundled_case(name: str = "case30") -> Network:
    """Load one of the cases shipped with the package (``case30``)."""
    here = Path(__file__).with_name("data")
    for suffix in (".json", ".m"):
        p = here / f"{name}{suffix}"
        if p.exists():
            return load_case(p)
    raise FileNotFoundError(name)
