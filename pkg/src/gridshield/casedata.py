"""Grid case parsing, validation, and admittance-matrix construction.

Two input formats are accepted:

* MATPOWER-style text with ``mpc.bus`` / ``mpc.gen`` / ``mpc.branch`` /
  ``mpc.gencost`` tables (the subset of columns the formulations consume),
  optionally followed by a sidecar JSON block between ``%%sidecar-begin``
  and ``%%sidecar-end`` lines carrying storage/attack metadata that the
  standard tables have no room for.
* The canonical JSON serialization produced by :func:`serialize_case`
  (round-trips exactly).

All electrical quantities are stored per-unit on ``base_mva``; conversion
from MW/MVAr happens here and only here.  Cost coefficients remain in
$/MW^2, $/MW, $ (costs are evaluated in MW space).
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import re
import weakref
from dataclasses import dataclass

import numpy as np


def per_case_cache(fn):
    """Memoize a single-argument function keyed by object identity.

    Hashing a NetworkCase traverses every nested tuple, which is far too
    slow for per-power-flow lookups; identity plus a weakref liveness check
    is both fast and safe against id reuse.
    """
    cache: dict = {}

    @functools.wraps(fn)
    def wrapper(obj):
        key = id(obj)
        hit = cache.get(key)
        if hit is not None and hit[0]() is obj:
            return hit[1]
        val = fn(obj)
        if len(cache) > 64:
            for k in [k for k, (r, _) in cache.items() if r() is None]:
                del cache[k]
        cache[key] = (weakref.ref(obj), val)
        return val

    return wrapper

SLACK, PV, PQ = "slack", "pv", "pq"
_MP_BUS_TYPES = {1: PQ, 2: PV, 3: SLACK}


class CaseSyntaxError(ValueError):
    """Malformed case text; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class CaseSemanticError(ValueError):
    """Structurally valid case that violates a model invariant."""


@dataclass(frozen=True)
class Bus:
    bus_id: int                 # external id from the case file
    btype: str                  # slack | pv | pq
    pd: float                   # base active demand, p.u.
    qd: float                   # base reactive demand, p.u.
    gs: float                   # shunt conductance, p.u. at V=1
    bs: float                   # shunt susceptance, p.u. at V=1
    vmin: float
    vmax: float


@dataclass(frozen=True)
class Generator:
    bus: int                    # internal bus index
    pmin: float                 # p.u.
    pmax: float
    qmin: float
    qmax: float
    c2: float                   # $/MW^2
    c1: float                   # $/MW
    c0: float                   # $

    def cost(self, p_pu: float, base_mva: float) -> float:
        p = p_pu * base_mva
        return self.c2 * p * p + self.c1 * p + self.c0


@dataclass(frozen=True)
class Branch:
    from_bus: int               # internal index
    to_bus: int
    r: float                    # p.u.
    x: float
    b: float                    # total charging susceptance, p.u.
    s_max: float                # thermal limit, p.u. (inf = unlimited)


@dataclass(frozen=True)
class BessUnit:
    bus: int                    # internal bus index (the single nonzero of its connectivity column)
    p_ch_max: float             # p.u.
    p_dis_max: float            # p.u.
    q_min: float                # p.u.
    q_max: float
    e_max: float                # p.u.-hours (MWh / base_mva)
    eta_ch: float
    eta_dis: float
    soc_min: float
    soc_max: float
    cost_per_mw: float          # $/MW on net injection


@dataclass(frozen=True)
class NetworkCase:
    """Validated, immutable grid description; safe to share across workers."""

    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    bess: tuple[BessUnit, ...] = ()
    attackable: tuple[int, ...] = ()        # generator indices
    slack_cost: tuple[float, float, float] = (0.0, 0.0, 0.0)  # c2, c1, c0
    xi1: float = 100.0                      # $/p.u. line-violation weight
    xi2: float = 100.0                      # $/p.u. voltage-violation weight

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_bess(self) -> int:
        return len(self.bess)

    @property
    def slack_bus(self) -> int:
        for i, b in enumerate(self.buses):
            if b.btype == SLACK:
                return i
        raise CaseSemanticError("no slack bus")  # unreachable after validation

    @property
    def slack_gen(self) -> int:
        for i, g in enumerate(self.generators):
            if self.buses[g.bus].btype == SLACK:
                return i
        raise CaseSemanticError("no generator at the slack bus")

    def bus_index(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.bus_id == bus_id:
                return i
        raise KeyError(f"unknown bus id {bus_id}")

    def slack_cost_value(self, p_slack_pu: float) -> float:
        c2, c1, c0 = self.slack_cost
        p = p_slack_pu * self.base_mva
        return c2 * p * p + c1 * p + c0

    def mw(self, pu: float) -> float:
        return pu * self.base_mva

    def pu(self, mw: float) -> float:
        return mw / self.base_mva


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix with cached polar decomposition."""

    y: np.ndarray               # complex (N, N)
    magnitude: np.ndarray       # |Y_ik|
    angle: np.ndarray           # alpha_ik, rad

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class LoadProfile:
    """Multiplicative per-bus demand factors for hours 1..T (T=24, dt=1 h)."""

    factors: np.ndarray         # (T, n_bus), all > 0
    dt: float = 1.0

    @property
    def horizon(self) -> int:
        return self.factors.shape[0]

    def demand(self, case: NetworkCase, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Scaled (P_d, Q_d) in p.u. at hour index t (0-based)."""
        pd = np.array([b.pd for b in case.buses])
        qd = np.array([b.qd for b in case.buses])
        f = self.factors[t]
        return pd * f, qd * f


def flat_profile(case: NetworkCase, horizon: int = 24) -> LoadProfile:
    return LoadProfile(factors=np.ones((horizon, case.n_bus)))


@dataclass(frozen=True)
class CaseArrays:
    """Numpy views of the static case data, cached per case for hot loops."""
    pd: np.ndarray
    qd: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    smax: np.ndarray
    gen_bus: np.ndarray
    bess_bus: np.ndarray
    p_ch_max: np.ndarray
    p_dis_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    e_max: np.ndarray
    eta_ch: np.ndarray
    eta_dis: np.ndarray
    soc_min: np.ndarray
    soc_max: np.ndarray
    cost_per_mw: np.ndarray


@per_case_cache
def case_arrays(case: NetworkCase) -> CaseArrays:
    return CaseArrays(
        pd=np.array([b.pd for b in case.buses]),
        qd=np.array([b.qd for b in case.buses]),
        vmin=np.array([b.vmin for b in case.buses]),
        vmax=np.array([b.vmax for b in case.buses]),
        smax=np.array([br.s_max for br in case.branches]),
        gen_bus=np.array([g.bus for g in case.generators], dtype=int),
        bess_bus=np.array([u.bus for u in case.bess], dtype=int),
        p_ch_max=np.array([u.p_ch_max for u in case.bess]),
        p_dis_max=np.array([u.p_dis_max for u in case.bess]),
        q_min=np.array([u.q_min for u in case.bess]),
        q_max=np.array([u.q_max for u in case.bess]),
        e_max=np.array([u.e_max for u in case.bess]),
        eta_ch=np.array([u.eta_ch for u in case.bess]),
        eta_dis=np.array([u.eta_dis for u in case.bess]),
        soc_min=np.array([u.soc_min for u in case.bess]),
        soc_max=np.array([u.soc_max for u in case.bess]),
        cost_per_mw=np.array([u.cost_per_mw for u in case.bess]))


# ---------------------------------------------------------------------------
# parsing

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")


def _parse_matpower_tables(text: str):
    """Extract baseMVA and numeric tables from MATPOWER-style text."""
    tables: dict[str, list[list[float]]] = {}
    base_mva = None
    sidecar_lines: list[str] = []
    in_sidecar = False
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("%%sidecar-begin"):
            in_sidecar = True
            continue
        if stripped.startswith("%%sidecar-end"):
            in_sidecar = False
            continue
        if in_sidecar:
            sidecar_lines.append(re.sub(r"^%\s?", "", stripped))
            continue
        line = stripped.split("%")[0].strip()
        if not line:
            continue
        m = re.match(r"mpc\.baseMVA\s*=\s*([\d.eE+-]+)\s*;?", line)
        if m:
            base_mva = float(m.group(1))
            continue
        m = _TABLE_RE.match(line)
        if m:
            current = m.group(1)
            tables[current] = []
            line = line[m.end():]
        if current is None:
            continue
        closed = "]" in line
        line = line.split("]")[0].replace(";", " ; ")
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                tables[current].append([float(tok) for tok in chunk.split()])
            except ValueError as exc:
                raise CaseSyntaxError(f"non-numeric token in mpc.{current}: {exc}", lineno)
        if closed:
            current = None
    if current is not None:
        raise CaseSyntaxError(f"unterminated table mpc.{current}", len(text.splitlines()))
    sidecar = "\n".join(sidecar_lines).strip() or None
    return base_mva, tables, sidecar


def _require_columns(rows, n, table, line_offset=0):
    for i, row in enumerate(rows):
        if len(row) < n:
            raise CaseSyntaxError(
                f"{table} row {i + 1} has {len(row)} columns, expected >= {n}",
                line_offset)


def _build_case(base_mva, bus_rows, gen_rows, branch_rows, cost_rows, sidecar: dict):
    if base_mva is None or base_mva <= 0:
        raise CaseSemanticError("baseMVA missing or non-positive")

    buses = []
    id_to_idx: dict[int, int] = {}
    for row in bus_rows:
        bus_id = int(row[0])
        if bus_id in id_to_idx:
            raise CaseSemanticError(f"duplicate bus id {bus_id}")
        btype = _MP_BUS_TYPES.get(int(row[1]))
        if btype is None:
            raise CaseSemanticError(f"bus {bus_id}: unknown type code {int(row[1])}")
        vmax, vmin = float(row[11]), float(row[12])
        if not vmin < vmax:
            raise CaseSemanticError(f"bus {bus_id}: Vmin {vmin} must be < Vmax {vmax}")
        id_to_idx[bus_id] = len(buses)
        buses.append(Bus(
            bus_id=bus_id, btype=btype,
            pd=row[2] / base_mva, qd=row[3] / base_mva,
            gs=row[4] / base_mva, bs=row[5] / base_mva,
            vmin=vmin, vmax=vmax))

    slack_count = sum(1 for b in buses if b.btype == SLACK)
    if slack_count != 1:
        raise CaseSemanticError(f"exactly one slack bus required, found {slack_count}")

    if len(cost_rows) != len(gen_rows):
        raise CaseSemanticError(
            f"{len(gen_rows)} generators but {len(cost_rows)} gencost rows")
    gens = []
    for gi, (row, cost) in enumerate(zip(gen_rows, cost_rows)):
        bus_id = int(row[0])
        if bus_id not in id_to_idx:
            raise CaseSemanticError(f"generator {gi + 1} references unknown bus {bus_id}")
        if int(cost[0]) != 2 or int(cost[3]) != 3:
            raise CaseSemanticError(
                f"generator {gi + 1}: only 3-coefficient polynomial costs are supported")
        pmax, pmin = row[8] / base_mva, row[9] / base_mva
        if pmin > pmax:
            raise CaseSemanticError(f"generator {gi + 1}: Pmin > Pmax")
        gens.append(Generator(
            bus=id_to_idx[bus_id],
            pmin=pmin, pmax=pmax,
            qmin=row[4] / base_mva, qmax=row[3] / base_mva,
            c2=cost[4], c1=cost[5], c0=cost[6]))

    branches = []
    for bi, row in enumerate(branch_rows):
        f_id, t_id = int(row[0]), int(row[1])
        for bus_id in (f_id, t_id):
            if bus_id not in id_to_idx:
                raise CaseSemanticError(f"branch {bi + 1} references unknown bus {bus_id}")
        if len(row) > 8 and row[8] not in (0.0, 1.0):
            raise CaseSemanticError(
                f"branch {bi + 1}: off-nominal tap ratio {row[8]} is not supported")
        if len(row) > 9 and row[9] != 0.0:
            raise CaseSemanticError(f"branch {bi + 1}: phase shift is not supported")
        if len(row) > 10 and row[10] == 0.0:
            raise CaseSemanticError(f"branch {bi + 1}: out-of-service branches are not supported")
        rate = row[5] if len(row) > 5 else 0.0
        branches.append(Branch(
            from_bus=id_to_idx[f_id], to_bus=id_to_idx[t_id],
            r=row[2], x=row[3], b=row[4],
            s_max=(rate / base_mva) if rate > 0 else math.inf))

    bess_units = []
    for k, spec in enumerate(sidecar.get("bess", [])):
        bus_id = int(spec["bus"])
        if bus_id not in id_to_idx:
            raise CaseSemanticError(f"bess unit {k + 1} references unknown bus {bus_id}")
        eta_ch, eta_dis = float(spec["eta_ch"]), float(spec["eta_dis"])
        for name, eta in (("eta_ch", eta_ch), ("eta_dis", eta_dis)):
            if not 0.0 < eta <= 1.0:
                raise CaseSemanticError(f"bess unit {k + 1}: {name}={eta} outside (0, 1]")
        soc_min, soc_max = float(spec["soc_min"]), float(spec["soc_max"])
        if not soc_min < soc_max:
            raise CaseSemanticError(f"bess unit {k + 1}: soc_min must be < soc_max")
        bess_units.append(BessUnit(
            bus=id_to_idx[bus_id],
            p_ch_max=spec["p_ch_max_mw"] / base_mva,
            p_dis_max=spec["p_dis_max_mw"] / base_mva,
            q_min=spec["q_min_mvar"] / base_mva,
            q_max=spec["q_max_mvar"] / base_mva,
            e_max=spec["e_max_mwh"] / base_mva,
            eta_ch=eta_ch, eta_dis=eta_dis,
            soc_min=soc_min, soc_max=soc_max,
            cost_per_mw=float(spec.get("cost_per_mw", 0.0))))

    attackable = tuple(int(g) - 1 for g in sidecar.get("attackable_gens", []))
    slack_idx = next(i for i, b in enumerate(buses) if b.btype == SLACK)
    for g in attackable:
        if not 0 <= g < len(gens):
            raise CaseSemanticError(f"attackable generator index {g + 1} out of range")
        if gens[g].bus == slack_idx:
            raise CaseSemanticError("the slack generator cannot be attackable")

    if "slack_cost" in sidecar:
        sc = sidecar["slack_cost"]
        slack_cost = (float(sc["c2"]), float(sc["c1"]), float(sc["c0"]))
        if any(c < 0 for c in slack_cost):
            raise CaseSemanticError("slack cost coefficients must be nonnegative")
    else:
        sg = next(g for g in gens if g.bus == slack_idx)
        slack_cost = (sg.c2, sg.c1, sg.c0)

    case = NetworkCase(
        base_mva=base_mva,
        buses=tuple(buses),
        generators=tuple(gens),
        branches=tuple(branches),
        bess=tuple(bess_units),
        attackable=attackable,
        slack_cost=slack_cost,
        xi1=float(sidecar.get("xi1", 100.0)),
        xi2=float(sidecar.get("xi2", 100.0)))
    if not any(g.bus == slack_idx for g in gens):
        raise CaseSemanticError("no generator at the slack bus")
    return case


def parse_case(text: str, sidecar_text: str | None = None) -> NetworkCase:
    """Parse MATPOWER-style or canonical-JSON case content into a NetworkCase."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return _parse_canonical(text)
    base_mva, tables, embedded_sidecar = _parse_matpower_tables(text)
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseSyntaxError(f"missing table mpc.{required}")
    _require_columns(tables["bus"], 13, "bus")
    _require_columns(tables["gen"], 10, "gen")
    _require_columns(tables["branch"], 5, "branch")
    _require_columns(tables["gencost"], 7, "gencost")
    sidecar_src = sidecar_text if sidecar_text is not None else embedded_sidecar
    if sidecar_src:
        try:
            sidecar = json.loads(sidecar_src)
        except json.JSONDecodeError as exc:
            raise CaseSyntaxError(f"sidecar JSON: {exc.msg}", exc.lineno)
    else:
        sidecar = {}
    return _build_case(base_mva, tables["bus"], tables["gen"],
                       tables["branch"], tables["gencost"], sidecar)


def load_case(case_path, sidecar_path=None) -> NetworkCase:
    with open(case_path) as fh:
        text = fh.read()
    sidecar_text = None
    if sidecar_path is not None:
        with open(sidecar_path) as fh:
            sidecar_text = fh.read()
    return parse_case(text, sidecar_text)


# ---------------------------------------------------------------------------
# canonical serialization (p.u. values; exact round trip)

def serialize_case(case: NetworkCase) -> str:
    doc = {
        "format": "gridshield-case",
        "version": 1,
        "base_mva": case.base_mva,
        "buses": [vars(b).copy() for b in case.buses],
        "generators": [vars(g).copy() for g in case.generators],
        "branches": [{**vars(b), "s_max": None if math.isinf(b.s_max) else b.s_max}
                     for b in case.branches],
        "bess": [vars(u).copy() for u in case.bess],
        "attackable_gens": list(case.attackable),
        "slack_cost": list(case.slack_cost),
        "xi1": case.xi1,
        "xi2": case.xi2,
    }
    return json.dumps(doc, indent=1)


def _parse_canonical(text: str) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno)
    if doc.get("format") != "gridshield-case":
        raise CaseSyntaxError("not a gridshield-case document")
    buses = tuple(Bus(**b) for b in doc["buses"])
    if sum(1 for b in buses if b.btype == SLACK) != 1:
        raise CaseSemanticError(
            f"exactly one slack bus required, found {sum(1 for b in buses if b.btype == SLACK)}")
    for b in buses:
        if not b.vmin < b.vmax:
            raise CaseSemanticError(f"bus {b.bus_id}: Vmin must be < Vmax")
    branches = tuple(
        Branch(**{**b, "s_max": math.inf if b["s_max"] is None else b["s_max"]})
        for b in doc["branches"])
    for i, br in enumerate(branches):
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < len(buses):
                raise CaseSemanticError(f"branch {i + 1} references unknown bus index {end}")
    gens = tuple(Generator(**g) for g in doc["generators"])
    bess = tuple(BessUnit(**u) for u in doc["bess"])
    for k, u in enumerate(bess):
        if not 0 <= u.bus < len(buses):
            raise CaseSemanticError(f"bess unit {k + 1} references unknown bus index {u.bus}")
        if not (0.0 < u.eta_ch <= 1.0 and 0.0 < u.eta_dis <= 1.0):
            raise CaseSemanticError(f"bess unit {k + 1}: efficiency outside (0, 1]")
        if not u.soc_min < u.soc_max:
            raise CaseSemanticError(f"bess unit {k + 1}: soc_min must be < soc_max")
    case = NetworkCase(
        base_mva=doc["base_mva"], buses=buses, generators=gens, branches=branches,
        bess=bess, attackable=tuple(doc["attackable_gens"]),
        slack_cost=tuple(doc["slack_cost"]), xi1=doc["xi1"], xi2=doc["xi2"])
    slack_idx = case.slack_bus
    if not any(g.bus == slack_idx for g in gens):
        raise CaseSemanticError("no generator at the slack bus")
    for g in case.attackable:
        if not 0 <= g < len(gens):
            raise CaseSemanticError(f"attackable generator index {g + 1} out of range")
        if gens[g].bus == slack_idx:
            raise CaseSemanticError("the slack generator cannot be attackable")
    return case


# ---------------------------------------------------------------------------
# admittance matrix

def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    """Assemble the dense bus admittance matrix from branch and shunt data.

    Each branch contributes the standard pi-model stamps: series admittance
    1/(r+jx) on both diagonals and negated off-diagonals, plus half the
    charging susceptance on each end's diagonal.  Bus shunts go straight on
    the diagonal.
    """
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        ysh = complex(0.0, br.b / 2.0)
        f, t = br.from_bus, br.to_bus
        y[f, f] += ys + ysh
        y[t, t] += ys + ysh
        y[f, t] -= ys
        y[t, f] -= ys
    for i, bus in enumerate(case.buses):
        y[i, i] += complex(bus.gs, bus.bs)
    return AdmittanceMatrix(y=y, magnitude=np.abs(y), angle=np.angle(y))


# ---------------------------------------------------------------------------
# load profiles

def load_profile(csv_text: str, case: NetworkCase, horizon: int = 24) -> LoadProfile:
    """Parse an hourly factor CSV: header row, hour column, then either a
    single system-wide factor column or one column per bus id."""
    reader = csv.reader(io.StringIO(csv_text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise CaseSyntaxError("empty profile CSV")
    header = [h.strip().lower() for h in rows[0]]
    if header[0] != "hour":
        raise CaseSyntaxError("first column must be 'hour'", 1)
    data = rows[1:]
    if len(data) != horizon:
        raise CaseSemanticError(f"expected {horizon} hourly rows, found {len(data)}")

    per_bus = len(header) > 2
    if per_bus:
        if len(header) - 1 != case.n_bus:
            raise CaseSemanticError(
                f"{len(header) - 1} factor columns for {case.n_bus} buses")
        order = []
        for name in header[1:]:
            m = re.fullmatch(r"bus[_ ]?(\d+)", name)
            if not m:
                raise CaseSyntaxError(f"bad bus column name {name!r}", 1)
            order.append(case.bus_index(int(m.group(1))))

    factors = np.ones((horizon, case.n_bus))
    for i, row in enumerate(data):
        hour = int(float(row[0]))
        if hour != i + 1:
            raise CaseSemanticError(f"row {i + 2}: expected hour {i + 1}, found {hour}")
        vals = [float(v) for v in row[1:]]
        if any(v <= 0 for v in vals):
            raise CaseSemanticError(f"row {i + 2}: non-positive load factor")
        if per_bus:
            for col, v in zip(order, vals):
                factors[i, col] = v
        else:
            factors[i, :] = vals[0]
    return LoadProfile(factors=factors)
