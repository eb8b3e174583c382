"""Simulated message-passing execution of the distributed iteration.

Agents own their region state exclusively and the coordinator owns the global
state; every interaction happens through ``Message`` values whose payloads are
copies (never views) of agent data.  Sequential and thread-parallel execution
produce bit-identical trajectories because every reduction is performed in
fixed region order.  A ledger records the floating-point traffic of every
message, split into the algebraic payloads (condensed blocks up, dual steps
down) and itemized scalar bookkeeping.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import coordinate, local, model

COORDINATOR = "coordinator"

# message kinds
CONDENSED_UP = "CondensedUp"
CORRECTION_ROUND = "CorrectionRound"
DUAL_DOWN = "DualDown"
STEP_UP = "StepUp"
STEP_DOWN = "StepDown"
MERIT_PROBE = "MeritProbe"
MERIT_REPLY = "MeritReply"
GLOBALIZE_EVAL = "GlobalizeEval"
V_PIECE = "VPiece"

FORWARD = "forward"
BACKWARD = "backward"


# agent -> coordinator kinds are forward; coordinator -> agent kinds backward
_DIRECTION = {
    CONDENSED_UP: FORWARD,
    STEP_UP: FORWARD,
    MERIT_REPLY: FORWARD,
    V_PIECE: FORWARD,
    CORRECTION_ROUND: BACKWARD,
    DUAL_DOWN: BACKWARD,
    STEP_DOWN: BACKWARD,
    MERIT_PROBE: BACKWARD,
    GLOBALIZE_EVAL: BACKWARD,
}


@dataclass
class Message:
    kind: str
    sender: str
    receiver: str
    iteration: int
    payload: dict
    float_count: int
    overhead_count: int
    round: int = 0

    @property
    def direction(self):
        return _DIRECTION[self.kind]


def _payload_floats(arrays):
    return int(sum(np.asarray(a).size for a in arrays if a is not None))


def pack_symmetric(w):
    n = w.shape[0]
    iu = np.triu_indices(n)
    return w[iu].copy()


def unpack_symmetric(packed, n):
    w = np.zeros((n, n))
    iu = np.triu_indices(n)
    w[iu] = packed
    return w + np.triu(w, 1).T


@dataclass
class LedgerEntry:
    iteration: int
    direction: str
    kind: str
    region: int
    floats: int
    bytes: int


class Ledger:
    """Per-message float accounting; four bytes per float (single precision)."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, message, region):
        direction = message.direction
        kind = message.kind
        if message.kind == CONDENSED_UP and message.round > 0:
            kind = f"{CONDENSED_UP}.correction"
        if message.float_count:
            self.entries.append(LedgerEntry(
                message.iteration, direction, kind, region,
                message.float_count, 4 * message.float_count))
        if message.overhead_count:
            self.entries.append(LedgerEntry(
                message.iteration, direction, f"{kind}.scalars", region,
                message.overhead_count, 4 * message.overhead_count))

    def totals(self, iteration=None, kind=None, direction=None):
        out = 0
        for e in self.entries:
            if iteration is not None and e.iteration != iteration:
                continue
            if kind is not None and e.kind != kind:
                continue
            if direction is not None and e.direction != direction:
                continue
            out += e.floats
        return out

    def iterations(self):
        return sorted({e.iteration for e in self.entries})

    def to_csv(self):
        lines = ["iteration,direction,kind,region,floats,bytes"]
        for e in self.entries:
            lines.append(f"{e.iteration},{e.direction},{e.kind},{e.region},{e.floats},{e.bytes}")
        return "\n".join(lines) + "\n"


class Agent:
    """One regional worker: owns its iterate, prox center, and price slice."""

    def __init__(self, index, rp, opts, name=None):
        self.index = index
        self.name = name or f"region{index}"
        self.rp = rp
        self.opts = opts
        self.sigma = np.full(rp.n_x, opts.sigma_scale)
        self.mu = opts.mu0
        self.z = rp.flat_start()
        self.warm = local.initial_iterate(rp, opts.mu0)
        self.warm.x = self.z.copy()
        self.it = self.warm
        self.lam = np.zeros(rp.n_cpl)
        self.core = None
        self.step = None
        self.dlam = np.zeros(rp.n_cpl)
        self.inner_iters = 0
        self.timing = {"local": 0.0, "condense": 0.0, "recover": 0.0}
        self.globalize_cache = {}
        self._globalized = False

    # -- phase 1: decoupled solve + condensation -----------------------------
    def solve_and_condense(self, iteration):
        t0 = time.perf_counter()
        self.it, info = local.solve_decoupled(
            self.rp, self.z, self.lam, self.opts.rho, self.mu, self.sigma,
            self.warm, self.opts)
        self.inner_iters = info["inner_iters"]
        t1 = time.perf_counter()
        self.e_mu, self.e0 = local.local_residual(self.rp, self.it, self.lam, self.mu)
        message = self._condense_message(iteration, 0.0, 0.0, 0)
        self.timing["local"] = t1 - t0
        self.timing["condense"] = time.perf_counter() - t1
        return message

    def recondense(self, iteration, payload):
        t0 = time.perf_counter()
        message = self._condense_message(
            iteration, payload["delta_x"], payload["delta_gamma"], payload["round"])
        self.timing["condense"] += time.perf_counter() - t0
        return message

    def _condense_message(self, iteration, delta_x, delta_gamma, round_idx):
        self.core = local.condense_block(self.rp, self.it, self.lam, reg=(delta_x, delta_gamma))
        core = self.core
        ref = None
        if self.opts.mode == coordinate.GLOBALIZED or self._globalized:
            ref = (self.warm.x, self.warm.s)
        block = local.summarize(self.rp, self.it, self.lam, core, self.z, self.sigma,
                                self.e_mu, self.e0, self.inner_iters, ref_point=ref)
        w_packed = None if block.w is None else pack_symmetric(block.w)
        payload = {
            "region": self.index,
            "w_packed": w_packed,
            "h0": None if block.h0 is None else block.h0.copy(),
            "h_mu": None if block.h_mu is None else block.h_mu.copy(),
            "ax": block.ax.copy(),
            "e_mu": block.e_mu,
            "e0": block.e0,
            "inertia": block.inertia,
            "singular": block.singular,
            "f_value": block.f_value,
            "viol_eq_l1": block.viol_eq_l1,
            "viol_ineq_l1": block.viol_ineq_l1,
            "prox_sq": block.prox_sq,
            "inner_iters": block.inner_iters,
            "n_x": self.rp.n_x,
            "n_eq": self.rp.n_eq,
            "ref_f": block.ref_f,
            "ref_viol_l1": block.ref_viol_l1,
            "ref_ax": None if block.ref_ax is None else block.ref_ax.copy(),
        }
        algebraic = _payload_floats([w_packed, payload["h0"], payload["h_mu"]])
        overhead = _payload_floats([payload["ax"], payload["ref_ax"]]) + 3 + 7
        if ref is not None:
            overhead += 2  # ref_f and ref_viol_l1
        return Message(CONDENSED_UP, self.name, COORDINATOR, iteration, payload,
                       algebraic, overhead, round=round_idx)

    # -- phase 2: dual step, recovery, step lengths ---------------------------
    def handle_dual(self, iteration, payload):
        t0 = time.perf_counter()
        self.mu_next = payload["mu_next"]
        self.dlam = payload["dlam"].copy()
        self.step = local.recover_step(self.core, self.dlam, self.rp, self.it, self.mu_next)
        tau = local.fraction_to_boundary_tau(self.mu_next, self.opts.tau_min)
        beta_p, beta_d = local.step_lengths(
            self.it.s, self.step[2], self.it.kappa, self.step[3], tau)
        self.beta_p_local, self.beta_d_local = beta_p, beta_d
        self.timing["recover"] = time.perf_counter() - t0
        payload = {"region": self.index, "beta_p": beta_p, "beta_d": beta_d}
        return Message(STEP_UP, self.name, COORDINATOR, iteration, payload, 0, 2)

    def merit_probe(self, iteration, payload):
        """Candidate merit pieces at the capped full step (globalized mode)."""
        beta_p = payload["beta_p"]
        cand = local.candidate_merit_pieces(
            self.rp, self.it.x + beta_p * self.step[0], self.it.s + beta_p * self.step[2])
        out = {"region": self.index, "f": cand["f"], "viol_l1": cand["viol_l1"],
               "ax": cand["ax"].copy()}
        return Message(MERIT_REPLY, self.name, COORDINATOR, iteration, out,
                       0, 2 + _payload_floats([out["ax"]]))

    def globalize_eval(self, iteration, payload):
        """Re-solve the decoupled problem at a trial price (dual line search)."""
        lam_trial = payload["lam"].copy()
        key = payload["alpha3"]
        trial, info = local.solve_decoupled(
            self.rp, self.z, lam_trial, self.opts.rho, payload["mu"], self.sigma,
            self.it, self.opts)
        self.globalize_cache[key] = (lam_trial, trial, info["inner_iters"])
        value = self.rp.eval_objective(trial.x)
        if len(trial.s):
            value -= payload["mu"] * float(np.log(trial.s).sum())
        value += float(lam_trial @ (self.rp.a_coupled @ trial.x))
        value += 0.5 * self.opts.rho * float((trial.x - self.z) @ (self.sigma * (trial.x - self.z)))
        out = {"region": self.index, "value": value}
        return Message(V_PIECE, self.name, COORDINATOR, iteration, out, 0, 1)

    # -- phase 3: apply the update --------------------------------------------
    def apply_step(self, iteration, payload):
        alphas = payload["alphas"]
        beta_p = payload["beta_p"]
        beta_d = payload["beta_d"]
        self._globalized = payload.get("globalized", False)
        beta_kappa = self.beta_d_local if self.opts.kappa_step == "dual" else beta_p
        self.z, self.warm = local.apply_update(
            self.z, self.it, self.step, alphas, beta_p, beta_kappa)
        self.lam = self.lam + alphas[2] * beta_d * self.dlam
        chosen = payload.get("alpha3_choice")
        if chosen is not None and chosen in self.globalize_cache:
            lam_trial, trial, _ = self.globalize_cache[chosen]
            if np.allclose(lam_trial, self.lam):
                self.warm = trial.copy()
                self.warm.x = self.z.copy()
        self.globalize_cache = {}
        self.mu = self.mu_next

    # -- instrumentation (never used for coordination decisions) --------------
    def debug_state(self):
        return {
            "z": self.z.copy(),
            "s": self.warm.s.copy(),
            "kappa": self.warm.kappa.copy(),
            "gamma": self.warm.gamma.copy(),
        }


@dataclass
class FailureConfig:
    victim: int
    at_iteration: int


@dataclass
class RunResult:
    solution: coordinate.Solution
    records: list
    ledger: Ledger
    messages: list | None = None


@dataclass
class _BlockView:
    """Coordinator-side view of one region's condensed payload, restricted to
    the currently active consensus rows."""

    region: int
    e_mu: float
    e0: float
    ax: np.ndarray
    w: np.ndarray | None
    h0: np.ndarray | None
    h_mu: np.ndarray | None
    inertia: tuple
    singular: bool
    f_value: float
    viol_eq_l1: float
    viol_ineq_l1: float
    prox_sq: float
    inner_iters: int
    ref_f: float
    ref_viol_l1: float
    ref_ax: np.ndarray | None
    n_x: int
    n_eq: int


def _block_from_payload(p, n_cpl, sel=None):
    w = None if p["w_packed"] is None else unpack_symmetric(p["w_packed"], n_cpl)
    h0, h_mu, ax = p["h0"], p["h_mu"], p["ax"]
    ref_ax = p["ref_ax"]
    if sel is not None:
        w = None if w is None else w[np.ix_(sel, sel)]
        h0 = None if h0 is None else h0[sel]
        h_mu = None if h_mu is None else h_mu[sel]
        ax = ax[sel]
        ref_ax = None if ref_ax is None else ref_ax[sel]
    return _BlockView(
        region=p["region"], e_mu=p["e_mu"], e0=p["e0"], ax=ax, w=w, h0=h0,
        h_mu=h_mu, inertia=tuple(p["inertia"]), singular=p["singular"],
        f_value=p["f_value"], viol_eq_l1=p["viol_eq_l1"],
        viol_ineq_l1=p["viol_ineq_l1"], prox_sq=p["prox_sq"],
        inner_iters=p["inner_iters"], ref_f=p["ref_f"],
        ref_viol_l1=p["ref_viol_l1"], ref_ax=ref_ax, n_x=p["n_x"], n_eq=p["n_eq"])


def run(net, part, opts=None, mode="sequential", failure=None,
        coordinator_host=None, keep_messages=False):
    """Execute the distributed solve; returns RunResult(solution, records, ledger).

    ``mode`` is "sequential" or "parallel" (one worker thread per region); both
    produce bit-identical trajectories.  ``failure`` freezes one region from a
    given iteration on; ``coordinator_host`` names a region whose agent also
    plays the coordinator role (the reductions are unchanged).
    """
    opts = opts or coordinate.SolverOptions()
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown mode {mode!r}")
    engine = _Engine(net, part, opts, mode, failure, coordinator_host, keep_messages)
    try:
        return engine.run()
    finally:
        engine.close()


class _Engine:
    def __init__(self, net, part, opts, mode, failure, coordinator_host, keep_messages):
        self.net = net
        self.part = part
        self.opts = opts
        self.mode = mode
        self.failure = failure
        self.keep_messages = keep_messages
        self.rps = model.build_all_region_problems(net, part)
        coord_name = COORDINATOR if coordinator_host is None else f"region{coordinator_host}"
        self.coord_name = coord_name
        self.agents = [Agent(r, self.rps[r], opts) for r in range(part.n_regions)]
        self.ledger = Ledger()
        self.messages = [] if keep_messages else None
        self.rows_list = [rp.coupled_rows for rp in self.rps]
        self.pool = (
            ThreadPoolExecutor(max_workers=max(1, part.n_regions))
            if mode == "parallel" else None
        )

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(wait=True)

    # ordered parallel map with a barrier at collection
    def _map(self, fn_name, agents, *args, per_agent_args=None):
        def call(agent, extra):
            fn = getattr(agent, fn_name)
            return fn(*args) if extra is None else fn(*(args + (extra,)))

        extras = per_agent_args or [None] * len(agents)
        if self.pool is None:
            return [call(a, e) for a, e in zip(agents, extras)]
        futures = [self.pool.submit(call, a, e) for a, e in zip(agents, extras)]
        return [f.result() for f in futures]

    def _post(self, message):
        # attribute the entry to the non-coordinator party
        party = message.sender if message.direction == FORWARD else message.receiver
        self.ledger.record(message, _region_of_name(party))
        if self.messages is not None:
            self.messages.append(message)
        return message

    def alive(self, iteration):
        if self.failure is None or iteration < self.failure.at_iteration:
            return list(range(self.part.n_regions))
        return [r for r in range(self.part.n_regions) if r != self.failure.victim]

    def active_rows(self, alive):
        if len(alive) == self.part.n_regions:
            return None  # all rows active
        alive_set = set(alive)
        return np.array(
            [k for k, (b, comp, owner, copier) in enumerate(self.part.rows)
             if owner in alive_set and copier in alive_set],
            dtype=int,
        )

    def run(self):
        opts, part = self.opts, self.part
        lam = np.zeros(part.n_lambda)
        mu = opts.mu0
        delta_last = 0.0
        merit = coordinate.MeritState()
        mode_now = opts.mode
        records = []
        e0_initial = None
        e0_prev = np.inf
        up_streak = 0
        stag_streak = 0
        obj_prev = None
        status = coordinate.STATUS_ITERATION_CAP
        message_text = ""
        degraded = False
        cached = {}

        for t in range(1, opts.max_outer + 1):
            timing = {}
            iteration_mode = mode_now
            alive = self.alive(t)
            degraded = degraded or len(alive) < part.n_regions
            agents = [self.agents[r] for r in alive]
            active = self.active_rows(alive)

            t0 = time.perf_counter()
            try:
                ups = self._map("solve_and_condense", agents, t)
            except local.LocalSolveError as exc:
                status, message_text = self._failure_status(alive, lam, opts), str(exc)
                break
            for m in ups:
                self._post(m)
                cached[m.payload["region"]] = m.payload
            timing["local"] = self._agent_time(agents, "local")
            timing["condense"] = self._agent_time(agents, "condense")

            sel_list, rows_active, n_lambda_act, b_act = self._active_structure(alive, active)
            blocks = [
                _block_from_payload(cached[r], len(self.rows_list[r]), sel_list[k])
                for k, r in enumerate(alive)
            ]

            t1 = time.perf_counter()
            n_x = sum(self.rps[r].n_x for r in alive)
            n_eq = sum(self.rps[r].n_eq for r in alive)

            round_counter = {"n": 0}

            def recondense(dx, dg, _t=t, _agents=agents, _alive=alive, _sel=sel_list):
                round_counter["n"] += 1
                rnd = round_counter["n"]
                payloads = [{"delta_x": dx, "delta_gamma": dg, "round": rnd}] * len(_agents)
                for r in _alive:
                    self._post(Message(CORRECTION_ROUND, self.coord_name,
                                       f"region{r}", _t, payloads[0], 0, 2))
                re_ups = self._map("recondense", _agents, _t, per_agent_args=payloads)
                out = []
                for m, sel in zip(re_ups, _sel):
                    self._post(m)
                    cached[m.payload["region"]] = m.payload
                    out.append(_block_from_payload(
                        m.payload, len(self.rows_list[m.payload["region"]]), sel))
                return out

            try:
                delta_x, delta_gamma, blocks, w_factor, h_vec, rounds = (
                    coordinate.run_inertia_correction(
                        blocks, rows_active, n_x, n_eq, n_lambda_act, b_act, mu,
                        delta_last, opts, recondense))
            except coordinate.CorrectionFailure as exc:
                status, message_text = coordinate.STATUS_DIVERGED, str(exc)
                break
            delta_last = delta_x if rounds else 0.0

            cons = coordinate.consensus_violation(
                [blk.ax for blk in blocks], b_act, rows_active)
            e_mu = max(max(blk.e_mu for blk in blocks), cons)
            e0 = max(max(blk.e0 for blk in blocks), cons)
            objective = sum(blk.f_value for blk in blocks)
            if e0_initial is None:
                e0_initial = e0

            mu_used = mu
            if e0 <= opts.epsilon:
                # certified before the coordination step; the iterate stands
                records.append(self._make_record(
                    t, mu_used, e_mu, e0, objective, cons, (0.0, 0.0, 0.0),
                    0.0, 0.0, delta_x, rounds, blocks, iteration_mode, timing,
                    alive, lam, mu))
                status = coordinate.STATUS_OPTIMAL
                break
            if e0 > opts.divergence_factor * max(e0_initial, 1.0):
                status = self._failure_status(alive, lam, opts)
                message_text = f"residual grew to {e0:.3e}"
                break
            up_streak = up_streak + 1 if e0 > e0_prev else 0
            if mode_now == coordinate.FULL_STEP and up_streak >= opts.fallback_window:
                mode_now = coordinate.GLOBALIZED
            if obj_prev is not None:
                rel = abs(objective - obj_prev) / max(1.0, abs(obj_prev))
                small = (
                    rel < opts.stagnation_rel_obj
                    and cons < opts.stagnation_consensus
                    and e0 > 0.9 * e0_prev
                )
                stag_streak = stag_streak + 1 if small else 0
            obj_prev = objective
            e0_prev = e0

            mu_next = coordinate.update_barrier(mu, opts.epsilon, e_mu, opts.eta_minus)

            # coordination solve on the active rows, using the transmitted split
            if n_lambda_act:
                _, h_vec = coordinate.assemble_dual_system(
                    blocks, rows_active, n_lambda_act, b_act, mu_next)
                dlam_act = w_factor.solve(-h_vec)
            else:
                dlam_act = np.zeros(0)
            dlam_full = np.zeros(part.n_lambda)
            if active is None:
                dlam_full[:] = dlam_act
            elif len(active):
                dlam_full[active] = dlam_act
            timing["coordinate"] = time.perf_counter() - t1

            down_payloads = []
            for r in alive:
                rows = self.rows_list[r]
                payload = {"dlam": dlam_full[rows].copy(), "mu_next": mu_next}
                self._post(Message(DUAL_DOWN, self.coord_name, f"region{r}", t,
                                   payload, len(rows), 1))
                down_payloads.append(payload)
            step_ups = self._map("handle_dual", agents, t, per_agent_args=down_payloads)
            for m in step_ups:
                self._post(m)
            timing["recover"] = self._agent_time(agents, "recover")

            t2 = time.perf_counter()
            beta_p = min(m.payload["beta_p"] for m in step_ups)
            beta_d = min(m.payload["beta_d"] for m in step_ups)

            alphas = (1.0, 1.0, 1.0)
            alpha3_choice = None
            if iteration_mode == coordinate.GLOBALIZED:
                merit.refresh(lam)
                alphas, alpha3_choice = self._globalize_stage(
                    t, agents, blocks, rows_active, b_act, beta_p, beta_d,
                    dlam_full, lam, mu_next, merit)

            down = {
                "alphas": alphas,
                "beta_p": beta_p,
                "beta_d": beta_d,
                "alpha3_choice": alpha3_choice,
                "globalized": mode_now == coordinate.GLOBALIZED,
            }
            for r in alive:
                overhead = 2 + (3 if iteration_mode == coordinate.GLOBALIZED else 0)
                self._post(Message(STEP_DOWN, self.coord_name, f"region{r}", t,
                                   down, 0, overhead))
            self._map("apply_step", agents, t, per_agent_args=[down] * len(agents))
            lam = lam + alphas[2] * beta_d * dlam_full
            mu = mu_next
            timing["sync"] = time.perf_counter() - t2

            records.append(self._make_record(
                t, mu_used, e_mu, e0, objective, cons, alphas, beta_p, beta_d,
                delta_x, rounds, blocks, iteration_mode, timing, alive, lam, mu))

            if stag_streak >= opts.stagnation_window:
                status = self._failure_status(alive, lam, opts,
                                              coordinate.STATUS_STAGNATION)
                message_text = "relative objective decrease became negligible"
                break

        solution = self._final_solution(status, records, lam, mu, degraded,
                                        message_text)
        return RunResult(solution, records, self.ledger,
                         messages=self.messages)

    # -- helpers ---------------------------------------------------------------
    def _make_record(self, t, mu_used, e_mu, e0, objective, cons, alphas,
                     beta_p, beta_d, delta_x, rounds, blocks, mode_now, timing,
                     alive, lam, mu):
        record = coordinate.IterationRecord(
            iteration=t, mu=mu_used, e_mu=e_mu, e0=e0, objective=objective,
            consensus_inf=cons, alpha=alphas, beta_p=beta_p, beta_d=beta_d,
            delta_x=delta_x, correction_rounds=rounds,
            inner_iters=sum(blk.inner_iters for blk in blocks), mode=mode_now,
            forward_floats=self.ledger.totals(iteration=t, kind=CONDENSED_UP),
            backward_floats=self.ledger.totals(iteration=t, kind=DUAL_DOWN),
            overhead_floats=self._overhead_floats(t),
            timing=timing,
            iterate_hash=self._hash(alive, lam, mu),
        )
        if self.opts.track_iterates:
            record.state = self._state_snapshot(alive, lam, mu)
        record.region_e0 = [blk.e0 for blk in blocks]
        return record

    def _agent_time(self, agents, key):
        values = [a.timing.get(key, 0.0) for a in agents]
        return max(values) if self.mode == "parallel" else sum(values)

    def _active_structure(self, alive, active):
        if active is None:
            return ([None] * len(alive), [self.rows_list[r] for r in alive],
                    self.part.n_lambda, self.part.b)
        remap = -np.ones(self.part.n_lambda, dtype=int)
        remap[active] = np.arange(len(active))
        sel_list, rows_active = [], []
        for r in alive:
            rows = self.rows_list[r]
            sel = np.array([k for k, row in enumerate(rows) if remap[row] >= 0], dtype=int)
            sel_list.append(sel)
            rows_active.append(remap[rows[sel]] if len(sel) else np.zeros(0, dtype=int))
        return sel_list, rows_active, len(active), self.part.b[active]

    def _overhead_floats(self, iteration):
        total = self.ledger.totals(iteration=iteration)
        fwd = self.ledger.totals(iteration=iteration, kind=CONDENSED_UP)
        bwd = self.ledger.totals(iteration=iteration, kind=DUAL_DOWN)
        return total - fwd - bwd

    def _hash(self, alive, lam, mu):
        pieces = []
        for r in alive:
            st = self.agents[r].debug_state()
            pieces += [st["z"], st["s"], st["kappa"], st["gamma"]]
        pieces += [lam, [mu]]
        return coordinate.state_hash(pieces)

    def _state_snapshot(self, alive, lam, mu):
        zs, ss, ks, gs = [], [], [], []
        for r in alive:
            st = self.agents[r].debug_state()
            zs.append(st["z"])
            ss.append(st["s"])
            ks.append(st["kappa"])
            gs.append(st["gamma"])
        return {"z": zs, "s": ss, "kappa": ks, "gamma": gs, "lam": lam.copy(), "mu": mu}

    def _failure_status(self, alive, lam, opts, fallback=coordinate.STATUS_DIVERGED):
        feas = max(
            coordinate.feasibility_inf(self.rps[r], self.agents[r].it) for r in alive
        )
        return coordinate.classify_failure(feas, opts, fallback)

    def _globalize_stage(self, t, agents, blocks, rows_active, b_act, beta_p,
                         beta_d, dlam_full, lam, mu_next, merit):
        opts = self.opts
        alive = [a.index for a in agents]
        for r in alive:
            self._post(Message(MERIT_PROBE, self.coord_name, f"region{r}", t,
                               {"beta_p": beta_p}, 0, 1))
        replies = self._map("merit_probe", agents, t,
                            per_agent_args=[{"beta_p": beta_p}] * len(agents))
        for m in replies:
            self._post(m)

        cons_ref = coordinate.consensus_violation(
            [blk.ref_ax for blk in blocks], b_act, rows_active)
        cons_dec = coordinate.consensus_violation(
            [blk.ax for blk in blocks], b_act, rows_active)
        cons_full = coordinate.consensus_violation(
            [m.payload["ax"][sel] if sel is not None else m.payload["ax"]
             for m, sel in zip(replies, self._active_sel(alive))],
            b_act, rows_active)
        m_ref = coordinate.merit_value(
            sum(blk.ref_f for blk in blocks), cons_ref,
            sum(blk.ref_viol_l1 for blk in blocks), merit.eps1, merit.eps2)
        m_dec = coordinate.merit_value(
            sum(blk.f_value for blk in blocks), cons_dec,
            sum(blk.viol_eq_l1 + blk.viol_ineq_l1 for blk in blocks),
            merit.eps1, merit.eps2)
        m_full = coordinate.merit_value(
            sum(m.payload["f"] for m in replies), cons_full,
            sum(m.payload["viol_l1"] for m in replies), merit.eps1, merit.eps2)
        decrease = (0.5 * opts.rho * sum(blk.prox_sq for blk in blocks)
                    + merit.eps1 * cons_dec)

        chosen = {}

        def dual_eval(a3):
            lam_trial = lam + a3 * beta_d * dlam_full
            payloads = []
            for agent in agents:
                rows = self.rows_list[agent.index]
                payload = {"lam": lam_trial[rows].copy(), "mu": mu_next, "alpha3": a3}
                self._post(Message(GLOBALIZE_EVAL, self.coord_name,
                                   f"region{agent.index}", t, payload,
                                   0, len(rows) + 2))
                payloads.append(payload)
            vals = self._map("globalize_eval", agents, t, per_agent_args=payloads)
            total = 0.0
            for m in vals:
                self._post(m)
                total += m.payload["value"]
            chosen[a3] = True
            return total - float(lam_trial @ self.part.b)

        alphas = coordinate.globalize(m_ref, m_full, m_dec, decrease, opts, dual_eval)
        alpha3_choice = alphas[2] if alphas[:2] == (0.0, 0.0) and chosen else None
        return alphas, alpha3_choice

    def _active_sel(self, alive):
        active = self.active_rows(alive)
        if active is None:
            return [None] * len(alive)
        sel_list, _, _, _ = self._active_structure(alive, active)
        return sel_list

    def _final_solution(self, status, records, lam, mu, degraded, message_text):
        part, opts = self.part, self.opts
        alive = self.alive(records[-1].iteration if records else 1)
        iterates = [self.agents[r].it for r in range(part.n_regions)]
        lam_slices = [lam[rows] for rows in self.rows_list]
        cert = coordinate.certify(self.rps, iterates, lam_slices, part.b,
                                  self.rows_list, opts.epsilon)
        uncertified = []
        if degraded and self.failure is not None:
            victim = self.failure.victim
            frozen = [k for k, (b, c, o, cp) in enumerate(part.rows)
                      if o == victim or cp == victim]
            uncertified = [f"region:{victim}", f"consensus-rows:{frozen}"]
        voltages, dispatch = coordinate.extract_solution(self.net, self.rps, iterates)
        objective = sum(self.rps[r].eval_objective(self.agents[r].it.x)
                        for r in range(part.n_regions))
        return coordinate.Solution(
            status=status,
            objective=objective,
            e0=cert["e0"],
            iterations=len(records),
            mu_final=mu,
            certificate=cert,
            records=records,
            voltages=voltages,
            dispatch=dispatch,
            degraded=degraded,
            uncertified=uncertified,
            message=message_text,
        )


def _region_of_name(name):
    if name.startswith("region"):
        try:
            return int(name[len("region"):])
        except ValueError:
            pass
    return -1


def inject_failure(net, part, opts, victim, at_iteration, mode="sequential"):
    """Run with one region going silent from ``at_iteration`` on; the report is
    marked degraded and lists the certificate components that are frozen."""
    if not 0 <= victim < part.n_regions:
        raise ValueError(f"victim region {victim} out of range")
    return run(net, part, opts, mode=mode,
               failure=FailureConfig(victim=victim, at_iteration=at_iteration))


# ---------------------------------------------------------------------------
# communication report

def closed_form_forward(n_cpl_list):
    return sum(2 * n + n * (n + 1) // 2 for n in n_cpl_list)


def closed_form_backward(n_cpl_list):
    return len(n_cpl_list) + sum(n_cpl_list)


def table_forms(n_cpl_list, n_pvars_list):
    """Worst-case per-iteration float counts of the three algorithm families,
    evaluated at this partition's coupling fractions and region sizes."""
    xi = [(c / n) if n else 0.0 for c, n in zip(n_cpl_list, n_pvars_list)]
    nx = list(n_pvars_list)
    n_reg = len(nx)
    condensed_fwd = sum(x * x / 2.0 * n * n + 2.5 * x * n for x, n in zip(xi, nx))
    condensed_bwd = 2 * n_reg + sum(x * n for x, n in zip(xi, nx))
    return {
        "admm": {
            "forward": sum(2 * n for n in nx),
            "backward": sum(nx),
            "total": sum(3 * n for n in nx),
            "forward_formula": "sum(2*Nx)",
            "backward_formula": "sum(Nx)",
        },
        "full-exchange": {
            "forward": sum(n * n + (3 + 2 * x) / 2.0 * n for x, n in zip(xi, nx)),
            "backward": sum((1 + x) * n for x, n in zip(xi, nx)),
            "total": sum(n * n + (5 + 4 * x) / 2.0 * n for x, n in zip(xi, nx)),
            "forward_formula": "sum(Nx^2 + (3+2*xi)/2*Nx)",
            "backward_formula": "sum((1+xi)*Nx)",
        },
        "condensed": {
            "forward": condensed_fwd,
            "backward": condensed_bwd,
            "total": condensed_fwd + 2 * n_reg + sum(3.5 * x * n for x, n in zip(xi, nx)),
            "forward_formula": "sum(xi^2/2*Nx^2 + 5*xi/2*Nx)",
            "backward_formula": "2*Nreg + sum(xi*Nx)",
        },
    }


def comm_report(ledger, part):
    """Measured ledger traffic vs the closed-form per-iteration predictions."""
    return comm_report_from_data(
        ledger,
        [reg.n_cpl for reg in part.regions],
        [reg.n_pvars for reg in part.regions],
    )


def comm_report_from_data(ledger, n_cpl_list, n_pvars_list):
    iterations = ledger.iterations()
    per_iteration = []
    for t in iterations:
        per_iteration.append({
            "iteration": t,
            "forward_algebraic": ledger.totals(iteration=t, kind=CONDENSED_UP),
            "backward_algebraic": ledger.totals(iteration=t, kind=DUAL_DOWN),
            "correction_extra": (
                ledger.totals(iteration=t, kind=f"{CONDENSED_UP}.correction")
                + ledger.totals(iteration=t, kind=f"{CONDENSED_UP}.correction.scalars")
                + ledger.totals(iteration=t, kind=f"{CORRECTION_ROUND}.scalars")
            ),
            "beta_sync": ledger.totals(iteration=t, kind=f"{STEP_DOWN}.scalars"),
            "scalar_overhead": sum(
                e.floats for e in ledger.entries
                if e.iteration == t and e.kind not in (CONDENSED_UP, DUAL_DOWN)
            ),
        })
    totals = {
        "forward_algebraic": ledger.totals(kind=CONDENSED_UP),
        "backward_algebraic": ledger.totals(kind=DUAL_DOWN),
        "all_floats": ledger.totals(),
    }
    fwd = closed_form_forward(n_cpl_list)
    bwd = closed_form_backward(n_cpl_list)
    report = {
        "per_iteration": per_iteration,
        "totals": totals,
        "predicted_per_iteration": {
            "forward_algebraic": fwd,
            "forward_formula": "sum(2*Ncpl + Ncpl*(Ncpl+1)/2)",
            "backward_with_beta_sync": bwd,
            "backward_formula": "Nreg + sum(Ncpl)",
            "per_region_ncpl": list(n_cpl_list),
        },
        "worst_case_forms": table_forms(n_cpl_list, n_pvars_list),
        "megabytes_per_iteration": {
            "measured_total": 4.0 * (totals["all_floats"] / max(1, len(iterations))) / 1e6,
            "note": "4 bytes per float (single precision)",
        },
    }
    return report
