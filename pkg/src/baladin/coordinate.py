"""Driver-level logic: residual aggregation, barrier schedule, coordination
solve, distributed inertia correction, globalization, and the centralized
barrier-Newton oracle.

The centralized solver runs the same per-iteration mathematics as the
distributed driver applied to the whole network as a single region with empty
consensus, but through direct calls instead of the message-passing runtime.
An identity-partition distributed run therefore reproduces its iterates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import kkt, local, model
from . import partition as partition_mod

STATUS_OPTIMAL = "optimal"
STATUS_STAGNATION = "stagnation"
STATUS_ITERATION_CAP = "iteration-cap"
STATUS_DIVERGED = "diverged"
STATUS_INFEASIBLE = "infeasible-diagnostic"

FULL_STEP = "full-step"
GLOBALIZED = "globalized"


class CoordinationError(RuntimeError):
    pass


class CorrectionFailure(RuntimeError):
    def __init__(self, rounds, detail):
        self.rounds = rounds
        super().__init__(f"inertia correction failed after {rounds} rounds: {detail}")


@dataclass
class SolverOptions:
    epsilon: float = 1e-6          # termination tolerance on the zero-barrier residual
    eta_minus: float = 10.0        # barrier acceptance factor
    mu0: float = 0.1
    # the prox weight must dominate the (per-unit) cost curvature for the
    # coordination step to be contractive from cold starts; 1e2 is far too
    # small for $-scale objectives
    rho: float = 1e5
    sigma_scale: float = 1.0       # prox scaling matrix = sigma_scale * identity
    tau_min: float = 0.99
    mode: str = FULL_STEP
    max_outer: int = 200
    inner_max_iter: int = 100
    delta_x0: float = 1e-4
    delta_x_min: float = 1e-20
    eta_fast: float = 100.0
    eta_slow: float = 8.0
    eta_red: float = 1.0 / 3.0
    delta_gamma0: float = 1e-8     # multiplied by the barrier value when applied
    correction_cap: int = 30
    kappa_step: str = "dual"       # steplength convention for the kappa update
    merit_eta: float = 1e-4
    alpha3_grid: tuple = (1.0, 0.5, 0.25, 0.125, 0.0625)
    stagnation_rel_obj: float = 1e-9
    stagnation_consensus: float = 1e-6
    stagnation_window: int = 5
    fallback_window: int = 5       # consecutive residual increases before globalizing
    divergence_factor: float = 1e6
    infeasibility_tol: float = 1e-4
    track_iterates: bool = False
    check_inertia_certificate: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mu0 <= self.epsilon / 10.0:
            raise ValueError("mu0 must exceed epsilon/10")
        if self.eta_minus <= 0:
            raise ValueError("eta_minus must be positive")
        if self.mode not in (FULL_STEP, GLOBALIZED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kappa_step not in ("dual", "primal"):
            raise ValueError(f"unknown kappa_step {self.kappa_step!r}")

    def updated(self, **kw):
        return replace(self, **kw)


@dataclass
class IterationRecord:
    iteration: int
    mu: float
    e_mu: float
    e0: float
    objective: float
    consensus_inf: float
    alpha: tuple[float, float, float]
    beta_p: float
    beta_d: float
    delta_x: float
    correction_rounds: int
    inner_iters: int
    mode: str
    forward_floats: int = 0
    backward_floats: int = 0
    overhead_floats: int = 0
    timing: dict = field(default_factory=dict)
    iterate_hash: str = ""
    state: dict | None = None
    region_e0: list = field(default_factory=list)


@dataclass
class Solution:
    status: str
    objective: float
    e0: float
    iterations: int
    mu_final: float
    certificate: dict
    records: list
    voltages: dict
    dispatch: list
    degraded: bool = False
    uncertified: list = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# residual aggregation and barrier schedule

def consensus_violation(ax_contribs, b, rows_list=None):
    total = -np.asarray(b, dtype=float)
    if rows_list is None:
        for ax in ax_contribs:
            total = total + ax
    else:
        total = total.copy()
        for ax, rows in zip(ax_contribs, rows_list):
            total[rows] += ax
    return float(np.abs(total).max()) if len(total) else 0.0


def global_residual(e_values, ax_contribs, b, rows_list=None):
    """Max over regional residuals and the consensus violation."""
    consensus = consensus_violation(ax_contribs, b, rows_list)
    worst = max(e_values) if len(e_values) else 0.0
    return max(worst, consensus)


def update_barrier(mu, epsilon, e_mu, eta_minus=10.0):
    """Reduce mu once the mu-level residual clears the acceptance test."""
    if e_mu <= eta_minus * mu:
        return max(epsilon / 10.0, min(mu / 5.0, mu**1.5))
    return mu


# ---------------------------------------------------------------------------
# coordination system

def assemble_dual_system(blocks, rows_list, n_lambda, b, mu):
    W = np.zeros((n_lambda, n_lambda))
    h = -np.asarray(b, dtype=float).copy()
    for block, rows in zip(blocks, rows_list):
        if block.w is None:
            raise CoordinationError(f"region {block.region} block is singular")
        ix = np.ix_(rows, rows)
        W[ix] += block.w
        h[rows] += block.h0 + mu * block.h_mu
    return W, h


def coordination_solve(W, h, zero_tol=None):
    """Solve W dlam = -h; returns (dlam, inertia of W)."""
    factor = kkt.ldl_factor(W, zero_tol=zero_tol, equilibrate=True)
    if factor.singular:
        raise CoordinationError(f"dual Hessian singular, inertia {factor.inertia}")
    return factor.solve(-h), factor.inertia


def inertia_condition(blocks, w_inertia, n_x, n_eq, n_lambda):
    """Distributed certificate that the assembled KKT matrix has inertia
    (n_x, n_eq + n_lambda, 0)."""
    if any(b.singular for b in blocks):
        return False
    total = np.array([n_x, n_eq + n_lambda, 0])
    local_sum = np.sum([b.inertia for b in blocks], axis=0)
    return tuple(total - local_sum) == tuple(w_inertia)


def run_inertia_correction(blocks, rows_list, n_x, n_eq, n_lambda, b, mu,
                           delta_last, opts, recondense):
    """Inflate (delta_x, delta_gamma) and re-condense until the distributed
    inertia condition holds.

    ``recondense(delta_x, delta_gamma)`` returns fresh blocks for all regions.
    Returns (delta_x, delta_gamma, blocks, w_factor, h, rounds).
    """

    def test(blocks_now):
        if any(blk.singular for blk in blocks_now):
            return False, None, None, True
        W, h = assemble_dual_system(blocks_now, rows_list, n_lambda, b, mu)
        factor = kkt.ldl_factor(W, equilibrate=True)
        ok = inertia_condition(blocks_now, factor.inertia, n_x, n_eq, n_lambda)
        return ok, factor, h, factor.inertia[2] > 0

    ok, w_factor, h, zero_modes = test(blocks)
    if ok:
        return 0.0, 0.0, blocks, w_factor, h, 0

    if delta_last == 0.0:
        eta_inc, delta_x = opts.eta_fast, opts.delta_x0
    else:
        eta_inc, delta_x = opts.eta_slow, max(opts.eta_red * delta_last, opts.delta_x_min)

    rounds = 0
    while rounds < opts.correction_cap:
        delta_gamma = opts.delta_gamma0 * mu if zero_modes else 0.0
        blocks = recondense(delta_x, delta_gamma)
        rounds += 1
        ok, w_factor, h, zero_modes = test(blocks)
        if ok:
            return delta_x, delta_gamma, blocks, w_factor, h, rounds
        delta_x *= eta_inc
    raise CorrectionFailure(rounds, f"delta_x reached {delta_x:.3e}")


# ---------------------------------------------------------------------------
# globalization

def merit_value(f_sum, consensus_l1, viol_l1, eps1, eps2):
    """Exact-penalty merit of one candidate point."""
    return f_sum + eps1 * consensus_l1 + eps2 * viol_l1


@dataclass
class MeritState:
    eps1: float = 10.0
    eps2: float = 10.0

    def refresh(self, lam):
        scale = 10.0 * max(1.0, float(np.abs(lam).max()) if len(lam) else 1.0)
        self.eps1 = max(self.eps1, scale)
        self.eps2 = max(self.eps2, scale)


def globalize(merit_ref, merit_full, merit_decoupled, model_decrease, opts, dual_eval):
    """Three-stage step rule: full step, decoupled-only step, or a dual line
    search maximizing the prox-dual function along the lambda direction."""
    threshold = opts.merit_eta * model_decrease
    if merit_ref - merit_full >= threshold:
        return 1.0, 1.0, 1.0
    if merit_ref - merit_decoupled >= threshold:
        return 1.0, 0.0, 0.0
    best_a3, best_v = None, -np.inf
    for a3 in opts.alpha3_grid:
        v = dual_eval(a3)
        if v > best_v:
            best_a3, best_v = a3, v
    return 0.0, 0.0, best_a3


# ---------------------------------------------------------------------------
# certification and solution extraction

def state_hash(pieces):
    digest = hashlib.sha256()
    for arr in pieces:
        digest.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    return digest.hexdigest()[:16]


def certify(rps, iterates, lam_slices, b_vec, rows_list, epsilon):
    """Independent residual pass over the final iterates."""
    e0s, e_feas = [], []
    ax_list = []
    for rp, it, lam in zip(rps, iterates, lam_slices):
        _, e0 = local.local_residual(rp, it, lam, 0.0)
        e0s.append(e0)
        ce, ci = rp.eval_constraints(it.x)
        feas = max(
            np.abs(ce).max() if len(ce) else 0.0,
            np.abs(ci + it.s).max() if len(ci) else 0.0,
        )
        e_feas.append(feas)
        ax_list.append(np.asarray(rp.a_coupled @ it.x))
    consensus = consensus_violation(ax_list, b_vec, rows_list)
    e0 = max(max(e0s) if e0s else 0.0, consensus)
    interior = all(
        (len(it.s) == 0 or (it.s.min() > 0 and it.kappa.min() > 0)) for it in iterates
    )
    return {
        "e0": e0,
        "consensus_inf": consensus,
        "feasibility_inf": max(e_feas) if e_feas else 0.0,
        "interior": interior,
        "within_tolerance": bool(e0 <= epsilon and interior),
    }


def extract_solution(net, rps, iterates):
    """Stack core voltages and generator dispatch from per-region iterates."""
    voltages = {}
    dispatch = [None] * net.n_gen
    for rp, it in zip(rps, iterates):
        core = set(rp.core_buses)
        for k, bpos in enumerate(rp.local_buses):
            if bpos in core:
                voltages[net.buses[bpos].id] = complex(it.x[2 * k], it.x[2 * k + 1])
        off = 2 * len(rp.local_buses)
        for slot, g in enumerate(rp.core_gens):
            dispatch[g] = (float(it.x[off + 2 * slot]), float(it.x[off + 2 * slot + 1]))
    return voltages, dispatch


def classify_failure(feasibility_inf, opts, fallback):
    if feasibility_inf > opts.infeasibility_tol:
        return STATUS_INFEASIBLE
    return fallback


def feasibility_inf(rp, it):
    ce, ci = rp.eval_constraints(it.x)
    return max(
        np.abs(ce).max() if len(ce) else 0.0,
        np.abs(ci + it.s).max() if len(ci) else 0.0,
    )


def global_kkt_inertia_check(cores, rows_list, n_lambda):
    """Eigenvalue-based inertia of the assembled bordered KKT matrix (test hook)."""
    dims = [core.factor._matrix.shape[0] for core in cores]
    n = sum(dims) + n_lambda
    K = np.zeros((n, n))
    off = 0
    for core, rows in zip(cores, rows_list):
        d = core.factor._matrix.shape[0]
        K[off : off + d, off : off + d] = core.factor._matrix
        abar = core.abar_t.T  # (n_cpl, n_x + n_eq)
        for local_row, grow in enumerate(rows):
            K[sum(dims) + grow, off : off + d] = abar[local_row]
            K[off : off + d, sum(dims) + grow] = abar[local_row]
        off += d
    eigs = np.linalg.eigvalsh(K)
    tol = 1e-9 * max(1.0, np.abs(eigs).max())
    return (
        int((eigs > tol).sum()),
        int((eigs < -tol).sum()),
        int((np.abs(eigs) <= tol).sum()),
    )


# ---------------------------------------------------------------------------
# centralized oracle

def centralized_solve(net, opts=None):
    """Barrier-Newton on the monolithic problem: the distributed iteration with
    a single region, empty consensus, and direct calls instead of messages."""
    opts = opts or SolverOptions()
    part = partition_mod.make_identity_partition(net)
    rp = model.build_region_problem(net, part, 0)
    sigma = np.full(rp.n_x, opts.sigma_scale)
    lam = np.zeros(0)
    dlam = np.zeros(0)
    mu = opts.mu0
    z = rp.flat_start()
    warm = local.initial_iterate(rp, mu)
    warm.x = z.copy()
    delta_last = 0.0
    merit = MeritState()
    mode = opts.mode
    records = []
    e0_initial = None
    e0_prev = np.inf
    up_streak = 0
    stag_streak = 0
    obj_prev = None
    status = STATUS_ITERATION_CAP
    message = ""
    it = warm

    def make_record(t, mu_used, e_mu, e0, objective, cons, alphas, beta_p,
                    beta_d, delta_x, rounds, inner, mode_now):
        rec = IterationRecord(
            iteration=t, mu=mu_used, e_mu=e_mu, e0=e0, objective=objective,
            consensus_inf=cons, alpha=alphas, beta_p=beta_p, beta_d=beta_d,
            delta_x=delta_x, correction_rounds=rounds,
            inner_iters=inner, mode=mode_now,
            iterate_hash=state_hash([z, warm.s, warm.kappa, warm.gamma, lam, [mu]]),
            region_e0=[e0],
        )
        if opts.track_iterates:
            rec.state = {
                "z": [z.copy()],
                "s": [warm.s.copy()],
                "kappa": [warm.kappa.copy()],
                "gamma": [warm.gamma.copy()],
                "lam": lam.copy(),
                "mu": mu,
            }
        return rec

    for t in range(1, opts.max_outer + 1):
        iteration_mode = mode
        try:
            it, info = local.solve_decoupled(rp, z, lam, opts.rho, mu, sigma, warm, opts)
        except local.LocalSolveError as exc:
            cert = certify([rp], [warm], [lam], part.b, [rp.coupled_rows], opts.epsilon)
            status = classify_failure(cert["feasibility_inf"], opts, STATUS_DIVERGED)
            message = str(exc)
            voltages, dispatch = extract_solution(net, [rp], [warm])
            return Solution(status, rp.eval_objective(warm.x), cert["e0"], t - 1, mu,
                            cert, records, voltages, dispatch, message=message)

        e_mu_l, e0_l = local.local_residual(rp, it, lam, mu)
        holder = {}

        def recondense(dx, dg):
            core = local.condense_block(rp, it, lam, reg=(dx, dg))
            holder["core"] = core
            ref = (warm.x, warm.s) if iteration_mode == GLOBALIZED else None
            return [local.summarize(rp, it, lam, core, z, sigma, e_mu_l, e0_l,
                                    info["inner_iters"], ref_point=ref)]

        blocks = recondense(0.0, 0.0)
        try:
            delta_x, delta_gamma, blocks, w_factor, h, rounds = run_inertia_correction(
                blocks, [rp.coupled_rows], rp.n_x, rp.n_eq, part.n_lambda, part.b, mu,
                delta_last, opts, recondense)
        except CorrectionFailure as exc:
            status, message = STATUS_DIVERGED, str(exc)
            break
        delta_last = delta_x if rounds else 0.0
        block = blocks[0]
        core = holder["core"]

        cons = consensus_violation([block.ax], part.b, [rp.coupled_rows])
        e_mu = max(block.e_mu, cons)
        e0 = max(block.e0, cons)
        objective = block.f_value
        if e0_initial is None:
            e0_initial = e0

        mu_used = mu
        if e0 <= opts.epsilon:
            records.append(make_record(t, mu_used, e_mu, e0, objective, cons,
                                       (0.0, 0.0, 0.0), 0.0, 0.0, delta_x,
                                       rounds, info["inner_iters"], iteration_mode))
            status = STATUS_OPTIMAL
            break
        if e0 > opts.divergence_factor * max(e0_initial, 1.0):
            status = classify_failure(feasibility_inf(rp, it), opts, STATUS_DIVERGED)
            message = f"residual grew to {e0:.3e}"
            break
        up_streak = up_streak + 1 if e0 > e0_prev else 0
        if mode == FULL_STEP and up_streak >= opts.fallback_window:
            mode = GLOBALIZED
        if obj_prev is not None:
            rel = abs(objective - obj_prev) / max(1.0, abs(obj_prev))
            # only a stall: the residual must have stopped contracting too
            small = (
                rel < opts.stagnation_rel_obj
                and cons < opts.stagnation_consensus
                and e0 > 0.9 * e0_prev
            )
            stag_streak = stag_streak + 1 if small else 0
        obj_prev = objective
        e0_prev = e0

        mu_next = update_barrier(mu, opts.epsilon, e_mu, opts.eta_minus)

        step = local.recover_step(core, dlam, rp, it, mu_next)
        tau = local.fraction_to_boundary_tau(mu_next, opts.tau_min)
        beta_p, beta_d = local.step_lengths(it.s, step[2], it.kappa, step[3], tau)

        alphas = (1.0, 1.0, 1.0)
        if iteration_mode == GLOBALIZED:
            merit.refresh(lam)
            cand = local.candidate_merit_pieces(
                rp, it.x + beta_p * step[0], it.s + beta_p * step[2])
            m_ref = merit_value(block.ref_f, 0.0, block.ref_viol_l1, merit.eps1, merit.eps2)
            m_full = merit_value(cand["f"], 0.0, cand["viol_l1"], merit.eps1, merit.eps2)
            m_dec = merit_value(block.f_value, 0.0,
                                block.viol_eq_l1 + block.viol_ineq_l1,
                                merit.eps1, merit.eps2)
            decrease = 0.5 * opts.rho * block.prox_sq

            def dual_eval(a3):
                trial, _ = local.solve_decoupled(rp, z, lam, opts.rho, mu_next, sigma, it, opts)
                value = rp.eval_objective(trial.x)
                if len(trial.s):
                    value -= mu_next * float(np.log(trial.s).sum())
                value += 0.5 * opts.rho * float((trial.x - z) @ (sigma * (trial.x - z)))
                return value

            alphas = globalize(m_ref, m_full, m_dec, decrease, opts, dual_eval)

        beta_kappa = beta_d if opts.kappa_step == "dual" else beta_p
        z, warm = local.apply_update(z, it, step, alphas, beta_p, beta_kappa)
        lam = lam + alphas[2] * beta_d * dlam
        mu = mu_next

        records.append(make_record(t, mu_used, e_mu, e0, objective, cons, alphas,
                                   beta_p, beta_d, delta_x, rounds,
                                   info["inner_iters"], iteration_mode))

        if stag_streak >= opts.stagnation_window:
            status = classify_failure(feasibility_inf(rp, it), opts, STATUS_STAGNATION)
            message = "relative objective decrease became negligible"
            break

    cert = certify([rp], [it], [lam], part.b, [rp.coupled_rows], opts.epsilon)
    voltages, dispatch = extract_solution(net, [rp], [it])
    return Solution(
        status=status,
        objective=rp.eval_objective(it.x),
        e0=cert["e0"],
        iterations=len(records),
        mu_final=mu,
        certificate=cert,
        records=records,
        voltages=voltages,
        dispatch=dispatch,
        message=message,
    )


def baladin_solve(part, net, opts=None, mode="sequential", failure=None,
                  coordinator_host=None):
    """Consensus-coordinated distributed solve over a partition (see runtime)."""
    from . import runtime

    result = runtime.run(net, part, opts or SolverOptions(), mode=mode,
                         failure=failure, coordinator_host=coordinator_host)
    return result.solution, result.records
