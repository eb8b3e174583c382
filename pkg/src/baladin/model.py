"""Per-region objective, constraints, and analytic derivatives.

Every constraint row is stored as an exact quadratic form
``c_m(x) = 0.5 x'Q_m x + q_m'x + r_m``, so Jacobians are affine in x and the
Lagrangian Hessian is a constant combination of the Q_m.  Apparent-power line
limits, which are quartic in the voltage components, are lifted into this
format with four auxiliary flow variables per limited line (p/q at each end),
defined by quadratic equality rows; the limit itself is then a circle
constraint in the flow variables.

Variable layout per region: interleaved (u, w) for every local bus in sorted
position order, then (p, q) per core generator, then the flow blocks
(pf, qf, pt, qt) per enforced line limit.

Equality rows: (P, Q) balance per core bus, the w_ref = 0 gauge row if the
slack bus core is local, then the four flow-definition rows per limited line.
Inequality rows: line limits (from/to ends), angle-difference pairs, voltage
box pairs per core bus, generator box rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import netio
from .netio import ANGLE_UNBOUNDED


@dataclass
class QuadraticSet:
    """A stack of quadratic rows sharing one variable space."""

    n_rows: int
    n_x: int
    q_row: np.ndarray   # COO over all rows' Hessian entries
    q_i: np.ndarray
    q_j: np.ndarray
    q_v: np.ndarray
    lin: sp.csr_matrix  # (n_rows, n_x)
    const: np.ndarray

    def value(self, x):
        c = np.zeros(self.n_rows)
        if len(self.q_row):
            np.add.at(c, self.q_row, 0.5 * self.q_v * x[self.q_i] * x[self.q_j])
        return c + self.lin @ x + self.const

    def jacobian(self, x):
        J = self.lin.toarray()
        if len(self.q_row):
            np.add.at(J, (self.q_row, self.q_i), self.q_v * x[self.q_j])
        return J

    def hessian_combination(self, mult):
        H = np.zeros((self.n_x, self.n_x))
        if len(self.q_row):
            np.add.at(H, (self.q_i, self.q_j), mult[self.q_row] * self.q_v)
        return H

    def row_hessian(self, m):
        H = np.zeros((self.n_x, self.n_x))
        sel = self.q_row == m
        np.add.at(H, (self.q_i[sel], self.q_j[sel]), self.q_v[sel])
        return H


class _QuadBuilder:
    def __init__(self, n_x):
        self.n_x = n_x
        self.rows = 0
        self.q_row, self.q_i, self.q_j, self.q_v = [], [], [], []
        self.l_row, self.l_col, self.l_val = [], [], []
        self.const = []
        self.labels = []

    def add_row(self, label, quad=(), lin=(), const=0.0):
        """quad: iterable of (i, j, coeff) meaning coeff * x_i * x_j in the row value."""
        m = self.rows
        for i, j, coeff in quad:
            if i == j:
                self.q_row.append(m)
                self.q_i.append(i)
                self.q_j.append(i)
                self.q_v.append(2.0 * coeff)
            else:
                self.q_row += [m, m]
                self.q_i += [i, j]
                self.q_j += [j, i]
                self.q_v += [coeff, coeff]
        for i, coeff in lin:
            self.l_row.append(m)
            self.l_col.append(i)
            self.l_val.append(coeff)
        self.const.append(const)
        self.labels.append(label)
        self.rows += 1
        return m

    def build(self):
        return QuadraticSet(
            n_rows=self.rows,
            n_x=self.n_x,
            q_row=np.array(self.q_row, dtype=int),
            q_i=np.array(self.q_i, dtype=int),
            q_j=np.array(self.q_j, dtype=int),
            q_v=np.array(self.q_v, dtype=float),
            lin=sp.csr_matrix(
                (self.l_val, (self.l_row, self.l_col)), shape=(self.rows, self.n_x)
            ),
            const=np.array(self.const, dtype=float),
        )


@dataclass
class RegionProblem:
    index: int
    n_x: int
    n_pvars: int
    n_eq: int
    n_ineq: int
    eq: QuadraticSet
    ineq: QuadraticSet
    obj_quad_idx: np.ndarray   # variable indices of quadratic cost terms
    obj_quad_coef: np.ndarray  # a2 per term
    obj_lin: np.ndarray
    obj_const: float
    var_names: list[str]
    eq_labels: list[str]
    ineq_labels: list[str]
    a_coupled: sp.csr_matrix   # (n_cpl, n_x), consensus rows over all variables
    coupled_rows: np.ndarray
    core_buses: list[int]
    local_buses: list[int]
    core_gens: list[int]
    net: netio.PowerNetwork = field(repr=False, default=None)
    flow_rows: list = field(default_factory=list, repr=False)  # (eq row, column) pairs

    @property
    def n_cpl(self):
        return len(self.coupled_rows)

    def eval_objective(self, x):
        quad = float(np.dot(self.obj_quad_coef, x[self.obj_quad_idx] ** 2)) if len(self.obj_quad_idx) else 0.0
        return quad + float(self.obj_lin @ x) + self.obj_const

    def objective_gradient(self, x):
        g = self.obj_lin.copy()
        if len(self.obj_quad_idx):
            g[self.obj_quad_idx] += 2.0 * self.obj_quad_coef * x[self.obj_quad_idx]
        return g

    def objective_hessian(self):
        H = np.zeros((self.n_x, self.n_x))
        if len(self.obj_quad_idx):
            H[self.obj_quad_idx, self.obj_quad_idx] = 2.0 * self.obj_quad_coef
        return H

    def eval_constraints(self, x):
        return self.eq.value(x), self.ineq.value(x)

    def eval_derivatives(self, x, s, kappa, gamma, mu):
        """Return (g, J, R, H): the barrier-condensed gradient, the equality and
        inequality Jacobians, and the exact condensed Hessian."""
        if np.any(s <= 0):
            raise ValueError("slack variables must be strictly positive")
        J = self.eq.jacobian(x)
        R = self.ineq.jacobian(x)
        ci = self.ineq.value(x)
        sigma = kappa / s
        g = (
            self.objective_gradient(x)
            + J.T @ gamma
            + R.T @ kappa
            + R.T @ ((mu + kappa * ci) / s)
        )
        H = (
            self.objective_hessian()
            + self.eq.hessian_combination(gamma)
            + self.ineq.hessian_combination(kappa)
            + (R.T * sigma) @ R
        )
        return g, J, R, H

    def lagrangian_hessian(self, gamma, kappa):
        return (
            self.objective_hessian()
            + self.eq.hessian_combination(gamma)
            + self.ineq.hessian_combination(kappa)
        )

    def flat_start(self):
        """Interior-ish starting point: flat voltage, mid-box dispatch, exact flows."""
        x = np.zeros(self.n_x)
        for k in range(len(self.local_buses)):
            x[2 * k] = 1.0
        off = 2 * len(self.local_buses)
        for g_slot, g in enumerate(self.core_gens):
            gen = self.net.generators[g]
            x[off + 2 * g_slot] = 0.5 * (gen.p_min + gen.p_max)
            x[off + 2 * g_slot + 1] = 0.5 * (gen.q_min + gen.q_max)
        if self.flow_rows:
            # flow rows read  x_col - flow_expr(u, w) = 0; with x_col = 0 the
            # residual is -flow_expr, so the exact flow is its negation
            ce = self.eq.value(x)
            for row, col in self.flow_rows:
                x[col] = -ce[row]
        return x


def _flow_coefficients(br):
    """Quadratic terms of the from/to real and reactive line flows."""
    yff, yft, ytf, ytt = netio.branch_admittances(br)
    gff, bff = yff.real, yff.imag
    gft, bft = yft.real, yft.imag
    gtf, btf = ytf.real, ytf.imag
    gtt, btt = ytt.real, ytt.imag
    return (gff, bff, gft, bft), (gtt, btt, gtf, btf)


def _flow_quad(ui, wi, uj, wj, g_self, b_self, g_x, b_x):
    """p = g_self|Vi|^2 + g_x(ui uj + wi wj) + b_x(wi uj - ui wj)
    q = -b_self|Vi|^2 - b_x(ui uj + wi wj) + g_x(wi uj - ui wj)"""
    p_terms = [
        (ui, ui, g_self),
        (wi, wi, g_self),
        (ui, uj, g_x),
        (wi, wj, g_x),
        (wi, uj, b_x),
        (ui, wj, -b_x),
    ]
    q_terms = [
        (ui, ui, -b_self),
        (wi, wi, -b_self),
        (ui, uj, -b_x),
        (wi, wj, -b_x),
        (wi, uj, g_x),
        (ui, wj, -g_x),
    ]
    return p_terms, q_terms


def build_region_problem(net, part, r, admittance=None):
    reg = part.regions[r]
    adm = admittance if admittance is not None else netio.build_admittance(net)
    G, B = adm.G.tocsr(), adm.B.tocsr()

    local = reg.local_buses
    local_index = reg.local_index
    n_local = len(local)
    n_pvars = reg.n_pvars
    gen_off = 2 * n_local

    var_names = []
    for b in local:
        var_names += [f"u:{net.buses[b].id}", f"w:{net.buses[b].id}"]
    for g in reg.core_gens:
        var_names += [f"pg:{g}", f"qg:{g}"]

    flow_col_of = {}
    col = n_pvars
    for idx in reg.limit_lines:
        for tag in ("pf", "qf", "pt", "qt"):
            var_names.append(f"{tag}:{idx}")
            flow_col_of[(idx, tag)] = col
            col += 1
    n_x = col

    core_set = set(reg.core)
    gens_by_bus = {}
    for slot, g in enumerate(reg.core_gens):
        gens_by_bus.setdefault(net.bus_position(net.generators[g].bus), []).append(slot)

    eq = _QuadBuilder(n_x)
    for b in sorted(reg.core):
        k = local_index[b]
        ui, wi = 2 * k, 2 * k + 1
        p_terms, q_terms = [], []
        row = G.getrow(b).tocoo()
        for c, gval in zip(row.col, row.data):
            kc = local_index[c]
            uc, wc = 2 * kc, 2 * kc + 1
            if c == b:
                p_terms += [(ui, ui, gval), (wi, wi, gval)]
                q_terms += []
            else:
                p_terms += [(ui, uc, gval), (wi, wc, gval)]
                q_terms += [(wi, uc, gval), (ui, wc, -gval)]
        row = B.getrow(b).tocoo()
        for c, bval in zip(row.col, row.data):
            kc = local_index[c]
            uc, wc = 2 * kc, 2 * kc + 1
            if c == b:
                q_terms += [(ui, ui, -bval), (wi, wi, -bval)]
            else:
                p_terms += [(wi, uc, bval), (ui, wc, -bval)]
                q_terms += [(ui, uc, -bval), (wi, wc, -bval)]
        bus = net.buses[b]
        p_lin = [(gen_off + 2 * slot, -1.0) for slot in gens_by_bus.get(b, [])]
        q_lin = [(gen_off + 2 * slot + 1, -1.0) for slot in gens_by_bus.get(b, [])]
        eq.add_row(f"balP:{bus.id}", quad=p_terms, lin=p_lin, const=bus.p_load)
        eq.add_row(f"balQ:{bus.id}", quad=q_terms, lin=q_lin, const=bus.q_load)

    slack = net.slack_position
    if slack in core_set:
        eq.add_row("gauge", lin=[(2 * local_index[slack] + 1, 1.0)])

    flow_rows = []
    for idx in reg.limit_lines:
        br = net.branches[idx]
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        ui, wi = 2 * local_index[i], 2 * local_index[i] + 1
        uj, wj = 2 * local_index[j], 2 * local_index[j] + 1
        (f_self, f_b, f_gx, f_bx), (t_self, t_b, t_gx, t_bx) = _flow_coefficients(br)
        pf_terms, qf_terms = _flow_quad(ui, wi, uj, wj, f_self, f_b, f_gx, f_bx)
        pt_terms, qt_terms = _flow_quad(uj, wj, ui, wi, t_self, t_b, t_gx, t_bx)
        for tag, terms in (("pf", pf_terms), ("qf", qf_terms), ("pt", pt_terms), ("qt", qt_terms)):
            c = flow_col_of[(idx, tag)]
            m = eq.add_row(
                f"def_{tag}:{idx}",
                quad=[(i_, j_, -v) for i_, j_, v in terms],
                lin=[(c, 1.0)],
            )
            flow_rows.append((m, c))

    ineq = _QuadBuilder(n_x)
    for idx in reg.limit_lines:
        br = net.branches[idx]
        s2 = br.s_max * br.s_max
        pf, qf = flow_col_of[(idx, "pf")], flow_col_of[(idx, "qf")]
        pt, qt = flow_col_of[(idx, "pt")], flow_col_of[(idx, "qt")]
        ineq.add_row(f"smax_f:{idx}", quad=[(pf, pf, 1.0), (qf, qf, 1.0)], const=-s2)
        ineq.add_row(f"smax_t:{idx}", quad=[(pt, pt, 1.0), (qt, qt, 1.0)], const=-s2)

    for idx in reg.angle_lines:
        br = net.branches[idx]
        i, j = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        ui, wi = 2 * local_index[i], 2 * local_index[i] + 1
        uj, wj = 2 * local_index[j], 2 * local_index[j] + 1
        # bilinear form of tan(theta_lo) <= (uj wi - ui wj)/(ui uj + wi wj) <= tan(theta_hi),
        # multiplied through by the (positive, under |theta| < pi/2) denominator
        if br.theta_max < ANGLE_UNBOUNDED:
            t = np.tan(br.theta_max)
            ineq.add_row(
                f"ang_hi:{idx}",
                quad=[(uj, wi, 1.0), (ui, wj, -1.0), (ui, uj, -t), (wi, wj, -t)],
            )
        if br.theta_min > -ANGLE_UNBOUNDED:
            t = np.tan(br.theta_min)
            ineq.add_row(
                f"ang_lo:{idx}",
                quad=[(uj, wi, -1.0), (ui, wj, 1.0), (ui, uj, t), (wi, wj, t)],
            )

    for b in sorted(reg.core):
        bus = net.buses[b]
        ui, wi = 2 * local_index[b], 2 * local_index[b] + 1
        ineq.add_row(f"v_hi:{bus.id}", quad=[(ui, ui, 1.0), (wi, wi, 1.0)], const=-bus.v_max**2)
        ineq.add_row(f"v_lo:{bus.id}", quad=[(ui, ui, -1.0), (wi, wi, -1.0)], const=bus.v_min**2)

    for slot, g in enumerate(reg.core_gens):
        gen = net.generators[g]
        pc, qc = gen_off + 2 * slot, gen_off + 2 * slot + 1
        ineq.add_row(f"pg_hi:{g}", lin=[(pc, 1.0)], const=-gen.p_max)
        ineq.add_row(f"pg_lo:{g}", lin=[(pc, -1.0)], const=gen.p_min)
        ineq.add_row(f"qg_hi:{g}", lin=[(qc, 1.0)], const=-gen.q_max)
        ineq.add_row(f"qg_lo:{g}", lin=[(qc, -1.0)], const=gen.q_min)

    obj_idx, obj_coef = [], []
    obj_lin = np.zeros(n_x)
    obj_const = 0.0
    for slot, g in enumerate(reg.core_gens):
        gen = net.generators[g]
        pc = gen_off + 2 * slot
        if gen.a2 != 0.0:
            obj_idx.append(pc)
            obj_coef.append(gen.a2)
        obj_lin[pc] += gen.a1
        obj_const += gen.a0

    a_cols = reg.a_coupled.tocoo()
    a_full = sp.csr_matrix(
        (a_cols.data, (a_cols.row, a_cols.col)), shape=(reg.n_cpl, n_x)
    )

    eq_set = eq.build()
    ineq_set = ineq.build()
    rp = RegionProblem(
        index=r,
        n_x=n_x,
        n_pvars=n_pvars,
        n_eq=eq_set.n_rows,
        n_ineq=ineq_set.n_rows,
        eq=eq_set,
        ineq=ineq_set,
        obj_quad_idx=np.array(obj_idx, dtype=int),
        obj_quad_coef=np.array(obj_coef, dtype=float),
        obj_lin=obj_lin,
        obj_const=obj_const,
        var_names=var_names,
        eq_labels=eq.labels,
        ineq_labels=ineq.labels,
        a_coupled=a_full,
        coupled_rows=reg.coupled_rows.copy(),
        core_buses=list(reg.core),
        local_buses=list(reg.local_buses),
        core_gens=list(reg.core_gens),
        net=net,
        flow_rows=flow_rows,
    )
    return rp


def build_all_region_problems(net, part):
    adm = netio.build_admittance(net)
    return [build_region_problem(net, part, r, admittance=adm) for r in range(part.n_regions)]
