"""MATPOWER-subset case files: parsing, validation, per-unit model, bus admittance.

Only the blocks ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and
``mpc.gencost`` (polynomial, degree <= 2) are accepted.  Anything else in the
file is rejected rather than ignored, so a case that relies on unsupported
features (piecewise-linear costs, DC lines, area data) fails loudly instead of
producing a silently wrong objective.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

PQ = "PQ"
PV = "PV"
SLACK = "slack"

_BUS_TYPE = {1: PQ, 2: PV, 3: SLACK}

# |theta| bounds at or beyond pi/2 are treated as absent: the bilinear form of
# the angle constraint is only valid on (-pi/2, pi/2).
ANGLE_UNBOUNDED = math.pi / 2.0


class CaseSyntaxError(ValueError):
    """Malformed case text; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class CaseSemanticError(ValueError):
    """Structurally valid text with inconsistent content (names the record)."""


@dataclass
class Bus:
    id: int
    btype: str
    p_load: float
    q_load: float
    v_min: float
    v_max: float
    gs: float = 0.0
    bs: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float = 1.0
    shift: float = 0.0
    s_max: float | None = None
    theta_min: float = -ANGLE_UNBOUNDED
    theta_max: float = ANGLE_UNBOUNDED

    @property
    def has_angle_bounds(self):
        return self.theta_min > -ANGLE_UNBOUNDED or self.theta_max < ANGLE_UNBOUNDED


@dataclass
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    a2: float  # $/pu^2
    a1: float  # $/pu
    a0: float  # $


@dataclass
class PowerNetwork:
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    base_mva: float
    name: str = "case"
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def n_gen(self):
        return len(self.generators)

    def bus_position(self, bus_id):
        return self._index[bus_id]

    @property
    def slack_position(self):
        return next(k for k, b in enumerate(self.buses) if b.btype == SLACK)

    def gens_at(self, position):
        bid = self.buses[position].id
        return [g for g, gen in enumerate(self.generators) if gen.bus == bid]


@dataclass
class Admittance:
    """Real and imaginary parts of the nodal admittance matrix, per-unit."""

    G: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n(self):
        return self.G.shape[0]


_ALLOWED_FIELDS = {"version", "baseMVA", "bus", "gen", "branch", "gencost"}


def _strip_comments(text):
    out = []
    for line in text.splitlines():
        cut = line.find("%")
        out.append(line if cut < 0 else line[:cut])
    return out


def _line_of(lines, start_line, pattern):
    for k in range(start_line, len(lines)):
        if pattern in lines[k]:
            return k + 1
    return start_line + 1


def _parse_matrix(block, name, line_no):
    rows = []
    for chunk in block.replace("\n", ";").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        row = []
        for tok in chunk.split():
            try:
                row.append(float(tok))
            except ValueError:
                raise CaseSyntaxError(f"bad numeric token {tok!r} in mpc.{name}", line_no)
        rows.append(row)
    if not rows:
        raise CaseSyntaxError(f"empty matrix mpc.{name}", line_no)
    width = len(rows[0])
    for row in rows:
        if len(row) != width:
            raise CaseSyntaxError(f"ragged row in mpc.{name}", line_no)
    return np.array(rows)


def parse_matpower(text):
    """Parse a MATPOWER-subset case into a validated per-unit PowerNetwork."""
    lines = _strip_comments(text)
    clean = "\n".join(lines)

    name = "case"
    m = re.search(r"function\s+mpc\s*=\s*(\w+)", clean)
    if m:
        name = m.group(1)

    fields = {}
    for m in re.finditer(r"mpc\.(\w+)\s*=", clean):
        fname = m.group(1)
        line_no = clean[: m.start()].count("\n") + 1
        if fname not in _ALLOWED_FIELDS:
            raise CaseSemanticError(f"unsupported MATPOWER field mpc.{fname} (line {line_no})")
        fields[fname] = (m.end(), line_no)

    for req in ("baseMVA", "bus", "gen", "branch", "gencost"):
        if req not in fields:
            raise CaseSyntaxError(f"missing mpc.{req} block", None)

    start, line_no = fields["baseMVA"]
    m = re.match(r"\s*([0-9.eE+-]+)\s*;", clean[start:])
    if not m:
        raise CaseSyntaxError("cannot parse mpc.baseMVA", line_no)
    base = float(m.group(1))
    if base <= 0:
        raise CaseSemanticError(f"baseMVA must be positive, got {base}")

    mats = {}
    for fname in ("bus", "gen", "branch", "gencost"):
        start, line_no = fields[fname]
        m = re.match(r"\s*\[(.*?)\]\s*;", clean[start:], re.DOTALL)
        if not m:
            raise CaseSyntaxError(f"cannot find [...] for mpc.{fname}", line_no)
        mats[fname] = _parse_matrix(m.group(1), fname, line_no)

    return _build_network(name, base, mats["bus"], mats["gen"], mats["branch"], mats["gencost"])


def _build_network(name, base, bus, gen, branch, gencost):
    if bus.shape[1] < 13:
        raise CaseSyntaxError(f"mpc.bus needs 13 columns, got {bus.shape[1]}", None)
    if gen.shape[1] < 10:
        raise CaseSyntaxError(f"mpc.gen needs >= 10 columns, got {gen.shape[1]}", None)
    if branch.shape[1] < 13:
        raise CaseSyntaxError(f"mpc.branch needs 13 columns, got {branch.shape[1]}", None)
    if gencost.shape[0] != gen.shape[0]:
        raise CaseSemanticError(
            f"gencost has {gencost.shape[0]} rows for {gen.shape[0]} generators "
            "(reactive-power cost rows are not supported)"
        )

    buses = []
    seen = set()
    for row in bus:
        bid = int(row[0])
        if bid in seen:
            raise CaseSemanticError(f"duplicate bus id {bid}")
        seen.add(bid)
        btype = _BUS_TYPE.get(int(row[1]))
        if btype is None:
            raise CaseSemanticError(f"bus {bid}: unsupported bus type {int(row[1])}")
        v_min, v_max = float(row[12]), float(row[11])
        if v_min > v_max:
            raise CaseSemanticError(f"bus {bid}: v_min {v_min} > v_max {v_max}")
        if v_min <= 0:
            raise CaseSemanticError(f"bus {bid}: v_min must be positive")
        buses.append(
            Bus(
                id=bid,
                btype=btype,
                p_load=float(row[2]) / base,
                q_load=float(row[3]) / base,
                v_min=v_min,
                v_max=v_max,
                gs=float(row[4]) / base,
                bs=float(row[5]) / base,
            )
        )

    slack_ids = [b.id for b in buses if b.btype == SLACK]
    if len(slack_ids) != 1:
        raise CaseSemanticError(f"exactly one slack bus required, found {slack_ids or 'none'}")

    branches = []
    for k, row in enumerate(branch):
        if int(row[10]) == 0:
            continue  # out of service
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in seen:
                raise CaseSemanticError(f"branch {k + 1} ({f},{t}): undeclared bus {end}")
        r, x = float(row[2]), float(row[3])
        if r < 0:
            raise CaseSemanticError(f"branch {k + 1} ({f},{t}): negative resistance {r}")
        if x == 0:
            raise CaseSemanticError(f"branch {k + 1} ({f},{t}): zero reactance")
        rate_a = float(row[5])
        ang_lo, ang_hi = math.radians(float(row[11])), math.radians(float(row[12]))
        if ang_lo == 0 and ang_hi == 0:
            ang_lo, ang_hi = -ANGLE_UNBOUNDED, ANGLE_UNBOUNDED
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                r=r,
                x=x,
                b=float(row[4]),
                tap=float(row[8]) if row[8] != 0 else 1.0,
                shift=math.radians(float(row[9])),
                s_max=rate_a / base if rate_a > 0 else None,
                theta_min=max(ang_lo, -ANGLE_UNBOUNDED),
                theta_max=min(ang_hi, ANGLE_UNBOUNDED),
            )
        )

    generators = []
    for k, (grow, crow) in enumerate(zip(gen, gencost)):
        if int(grow[7]) == 0:
            continue  # out of service
        gbus = int(grow[0])
        if gbus not in seen:
            raise CaseSemanticError(f"generator {k + 1}: undeclared bus {gbus}")
        if int(crow[0]) != 2:
            raise CaseSemanticError(f"generator {k + 1}: piecewise-linear cost not supported")
        ncost = int(crow[3])
        if ncost > 3 or ncost < 1:
            raise CaseSemanticError(f"generator {k + 1}: cost degree {ncost - 1} not supported")
        coeffs = [0.0] * (3 - ncost) + [float(c) for c in crow[4 : 4 + ncost]]
        c2, c1, c0 = coeffs
        if c2 < 0:
            raise CaseSemanticError(f"generator {k + 1}: negative quadratic cost {c2}")
        p_min, p_max = float(grow[9]) / base, float(grow[8]) / base
        q_min, q_max = float(grow[4]) / base, float(grow[3]) / base
        if p_min > p_max:
            raise CaseSemanticError(f"generator {k + 1}: p_min > p_max")
        if q_min > q_max:
            raise CaseSemanticError(f"generator {k + 1}: q_min > q_max")
        generators.append(
            Generator(
                bus=gbus,
                p_min=p_min,
                p_max=p_max,
                q_min=q_min,
                q_max=q_max,
                a2=c2 * base * base,
                a1=c1 * base,
                a0=c0,
            )
        )

    return PowerNetwork(buses=buses, branches=branches, generators=generators, base_mva=base, name=name)


def load_case(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_matpower(f.read())


def branch_admittances(br):
    """Two-port admittance entries (yff, yft, ytf, ytt) of one branch Pi-model."""
    ys = 1.0 / complex(br.r, br.x)
    bc = 0.5j * br.b
    tap = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
    yff = (ys + bc) / (tap * tap.conjugate()).real
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    ytt = ys + bc
    return yff, yft, ytf, ytt


def build_admittance(net):
    """Assemble the nodal admittance matrix and return (G, B) = (Re Y, Im Y)."""
    n = net.n_bus
    rows, cols, vals = [], [], []
    for br in net.branches:
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        yff, yft, ytf, ytt = branch_admittances(br)
        rows += [i, i, j, j]
        cols += [i, j, i, j]
        vals += [yff, yft, ytf, ytt]
    for k, bus in enumerate(net.buses):
        rows.append(k)
        cols.append(k)
        vals.append(complex(bus.gs, bus.bs))
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return Admittance(G=sp.csr_matrix(Y.real), B=sp.csr_matrix(Y.imag))


# ---------------------------------------------------------------------------
# JSON interchange.  Field-for-field mirror of PowerNetwork; floats round-trip
# bitwise because json uses repr() for doubles.

def network_to_dict(net):
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "type": b.btype,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "gs": b.gs,
                "bs": b.bs,
            }
            for b in net.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b": br.b,
                "tap": br.tap,
                "shift": br.shift,
                "s_max": br.s_max,
                "theta_min": br.theta_min,
                "theta_max": br.theta_max,
            }
            for br in net.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_min": g.p_min,
                "p_max": g.p_max,
                "q_min": g.q_min,
                "q_max": g.q_max,
                "a2": g.a2,
                "a1": g.a1,
                "a0": g.a0,
            }
            for g in net.generators
        ],
    }


def network_from_dict(d):
    return PowerNetwork(
        buses=[
            Bus(
                id=b["id"],
                btype=b["type"],
                p_load=b["p_load"],
                q_load=b["q_load"],
                v_min=b["v_min"],
                v_max=b["v_max"],
                gs=b["gs"],
                bs=b["bs"],
            )
            for b in d["buses"]
        ],
        branches=[
            Branch(
                from_bus=br["from"],
                to_bus=br["to"],
                r=br["r"],
                x=br["x"],
                b=br["b"],
                tap=br["tap"],
                shift=br["shift"],
                s_max=br["s_max"],
                theta_min=br["theta_min"],
                theta_max=br["theta_max"],
            )
            for br in d["branches"]
        ],
        generators=[
            Generator(
                bus=g["bus"],
                p_min=g["p_min"],
                p_max=g["p_max"],
                q_min=g["q_min"],
                q_max=g["q_max"],
                a2=g["a2"],
                a1=g["a1"],
                a0=g["a0"],
            )
            for g in d["generators"]
        ],
        base_mva=d["base_mva"],
        name=d.get("name", "case"),
    )


def network_to_json(net):
    return json.dumps(network_to_dict(net), indent=1)


def network_from_json(text):
    return network_from_dict(json.loads(text))
