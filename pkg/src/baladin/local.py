"""Per-region agent operations for one outer iteration.

``solve_decoupled`` runs a damped Newton method on the perturbed KKT system of
the region's prox-regularized barrier problem, with fraction-to-boundary steps,
an l1-merit backtracking line search, and the same primal/dual regularization
scheme the coordinator uses.  The remaining functions evaluate the optimality
residual, condense the local KKT block onto the consensus rows, recover the
primal-dual step from the coordination solve, and compute step lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kkt

RESIDUAL_SCALE_CAP = 100.0  # s_max in the residual scaling rule


class LocalSolveError(RuntimeError):
    pass


@dataclass
class CondensedBlock:
    """Per-region payload sent to the coordinator after the condensation step.

    The dual gradient is transmitted as the split h = h0 + mu * h_mu so the
    coordinator can re-evaluate it after a barrier update; ``w`` is restricted
    to the region's coupled consensus rows.  ``ref_*`` fields carry the merit
    ingredients of the incoming iterate and are only populated in globalized
    mode.
    """

    region: int
    e_mu: float
    e0: float
    ax: np.ndarray
    w: np.ndarray | None
    h0: np.ndarray | None
    h_mu: np.ndarray | None
    inertia: tuple[int, int, int]
    singular: bool
    f_value: float
    viol_eq_l1: float
    viol_ineq_l1: float
    prox_sq: float
    inner_iters: int
    ref_f: float = 0.0
    ref_viol_l1: float = 0.0
    ref_ax: np.ndarray | None = None


@dataclass
class LocalIterate:
    x: np.ndarray
    s: np.ndarray
    gamma: np.ndarray
    kappa: np.ndarray

    def copy(self):
        return LocalIterate(self.x.copy(), self.s.copy(), self.gamma.copy(), self.kappa.copy())

    def assert_interior(self):
        if len(self.s) and (self.s.min() <= 0 or self.kappa.min() <= 0):
            raise LocalSolveError(
                f"iterate left the interior: min s = {self.s.min() if len(self.s) else None}, "
                f"min kappa = {self.kappa.min() if len(self.kappa) else None}"
            )


def initial_iterate(rp, mu, slack_floor=1e-2):
    """Cold start: flat voltages, mid-box dispatch, slacks from the constraint
    values (floored away from zero), multipliers from complementarity."""
    x = rp.flat_start()
    _, ci = rp.eval_constraints(x)
    s = np.maximum(-ci, slack_floor)
    kappa = mu / s
    gamma = np.zeros(rp.n_eq)
    return LocalIterate(x=x, s=s, gamma=gamma, kappa=kappa)


def residual_scalings(lam, gamma, kappa):
    cap = RESIDUAL_SCALE_CAP
    n_mult = len(lam) + len(gamma) + len(kappa)
    total = np.abs(lam).sum() + np.abs(gamma).sum() + np.abs(kappa).sum()
    s_d = max(cap, total / max(1, n_mult)) / cap
    s_c = max(cap, np.abs(kappa).sum() / max(1, len(kappa))) / cap
    return s_d, s_c


def local_residual(rp, it, lam_coupled, mu):
    """Optimality residual of the consensus-priced KKT conditions, at the given
    barrier value and at zero (the pair (E_mu, E_0))."""
    alam = rp.a_coupled.T @ lam_coupled
    J = rp.eq.jacobian(it.x)
    R = rp.ineq.jacobian(it.x)
    ce, ci = rp.eval_constraints(it.x)
    stat = rp.objective_gradient(it.x) + J.T @ it.gamma + R.T @ it.kappa + alam
    feas = max(
        np.abs(ce).max() if len(ce) else 0.0,
        np.abs(ci + it.s).max() if len(ci) else 0.0,
    )
    s_d, s_c = residual_scalings(lam_coupled, it.gamma, it.kappa)
    stat_term = (np.abs(stat).max() if len(stat) else 0.0) / s_d
    sk = it.s * it.kappa
    comp_mu = (np.abs(sk - mu).max() if len(sk) else 0.0) / s_c
    comp_0 = (np.abs(sk).max() if len(sk) else 0.0) / s_c
    e_mu = max(stat_term, comp_mu, feas)
    e_0 = max(stat_term, comp_0, feas)
    return e_mu, e_0


def fraction_to_boundary_tau(mu, tau_min=0.99):
    return max(tau_min, 1.0 - mu)


def step_lengths(s, ds, kappa, dkappa, tau):
    """Largest step fractions keeping s and kappa at least (1 - tau) of themselves."""
    def beta(v, dv):
        shrink = dv < 0
        if not np.any(shrink):
            return 1.0
        return float(min(1.0, np.min(tau * v[shrink] / (-dv[shrink]))))

    return beta(s, ds), beta(kappa, dkappa)


@dataclass
class CorrectionState:
    """Memory of the most recent accepted primal regularization."""

    last: float = 0.0


def corrected_factor(H, J, state, opts, mu):
    """Factor the bordered block, inflating (delta_x, delta_gamma) until the
    inertia is (n_x, n_eq, 0).  Returns (factor, delta_x, rounds)."""
    n_x, n_eq = H.shape[0], J.shape[0]
    target = (n_x, n_eq, 0)
    factor = kkt.factor_kkt(H, J)
    if factor.inertia == target:
        state.last = 0.0
        return factor, 0.0, 0
    if state.last == 0.0:
        eta_inc, delta = opts.eta_fast, opts.delta_x0
    else:
        eta_inc, delta = opts.eta_slow, max(opts.eta_red * state.last, opts.delta_x_min)
    delta_gamma = 0.0
    rounds = 0
    while rounds < opts.correction_cap:
        rounds += 1
        if factor.inertia[2] > 0:
            delta_gamma = opts.delta_gamma0 * mu
        factor = kkt.factor_kkt(H, J, delta, delta_gamma)
        if factor.inertia == target:
            state.last = delta
            return factor, delta, rounds
        delta *= eta_inc
    raise LocalSolveError(
        f"inertia correction exceeded {opts.correction_cap} rounds "
        f"(last inertia {factor.inertia}, target {target})"
    )


def _merit(rp, x, s, alam, rho, sigma, z, mu, nu):
    ce, ci = rp.eval_constraints(x)
    barrier = -mu * np.log(s).sum() if len(s) else 0.0
    prox = 0.5 * rho * float((x - z) @ (sigma * (x - z)))
    theta = np.abs(ce).sum() + (np.abs(ci + s).sum() if len(ci) else 0.0)
    value = rp.eval_objective(x) + float(alam @ x) + prox + barrier + nu * theta
    return value, theta


def solve_decoupled(rp, z, lam_coupled, rho, mu, sigma, warm, opts, tol=None):
    """Solve the region's decoupled barrier problem around prox center ``z``.

    Returns (LocalIterate, info).  The iterate satisfies the perturbed KKT
    conditions of the decoupled problem to ``tol`` (default eta_minus*mu/10)
    measured with the same scaled blocks as the optimality residual.
    """
    if mu <= 0 or rho <= 0:
        raise ValueError("mu and rho must be positive")
    tol = (opts.eta_minus * mu / 10.0) if tol is None else tol
    it = warm.copy() if warm is not None else initial_iterate(rp, mu)
    it.assert_interior()
    alam = rp.a_coupled.T @ lam_coupled
    sigma = np.full(rp.n_x, float(sigma)) if np.ndim(sigma) == 0 else np.asarray(sigma)
    tau = fraction_to_boundary_tau(mu, opts.tau_min)
    state = CorrectionState()
    nu = 10.0
    n_corrections = 0

    def decoupled_residual(cur):
        J = rp.eq.jacobian(cur.x)
        R = rp.ineq.jacobian(cur.x)
        ce, ci = rp.eval_constraints(cur.x)
        stat = (
            rp.objective_gradient(cur.x)
            + alam
            + rho * sigma * (cur.x - z)
            + J.T @ cur.gamma
            + R.T @ cur.kappa
        )
        s_d, s_c = residual_scalings(lam_coupled, cur.gamma, cur.kappa)
        feas = max(
            np.abs(ce).max() if len(ce) else 0.0,
            np.abs(ci + cur.s).max() if len(ci) else 0.0,
        )
        comp = (np.abs(cur.s * cur.kappa - mu).max() if len(cur.s) else 0.0) / s_c
        return max((np.abs(stat).max() if len(stat) else 0.0) / s_d, comp, feas)

    for inner in range(opts.inner_max_iter + 1):
        res = decoupled_residual(it)
        if not np.isfinite(res):
            raise LocalSolveError(f"non-finite residual in region {rp.index}")
        if res <= tol:
            return it, {"inner_iters": inner, "residual": res, "corrections": n_corrections}
        if inner == opts.inner_max_iter:
            break

        ce, ci = rp.eval_constraints(it.x)
        J = rp.eq.jacobian(it.x)
        R = rp.ineq.jacobian(it.x)
        sig_bar = it.kappa / it.s
        H = (
            rp.lagrangian_hessian(it.gamma, it.kappa)
            + np.diag(rho * sigma)
            + (R.T * sig_bar) @ R
        )
        g_cond = (
            rp.objective_gradient(it.x)
            + alam
            + rho * sigma * (it.x - z)
            + J.T @ it.gamma
            + R.T @ it.kappa
            + R.T @ ((mu + it.kappa * ci) / it.s)
        )
        factor, _, rounds = corrected_factor(H, J, state, opts, mu)
        n_corrections += rounds
        sol = -factor.solve(np.concatenate([g_cond, ce]))
        dx, dgamma = sol[: rp.n_x], sol[rp.n_x :]
        ds = -ci - it.s - R @ dx
        dkappa = -it.kappa + (mu - it.kappa * ds) / it.s
        beta_p, beta_d = step_lengths(it.s, ds, it.kappa, dkappa, tau)

        kappa_new_full = it.kappa + beta_d * dkappa
        nu = max(
            nu,
            1.1 * max(
                np.abs(it.gamma + dgamma).max() if len(it.gamma) else 0.0,
                np.abs(kappa_new_full).max() if len(kappa_new_full) else 0.0,
            )
            + 0.1,
        )
        phi0, theta0 = _merit(rp, it.x, it.s, alam, rho, sigma, z, mu, nu)
        grad_smooth = (
            rp.objective_gradient(it.x)
            + alam
            + rho * sigma * (it.x - z)
        )
        dphi = float(grad_smooth @ dx)
        if len(it.s):
            dphi += float((-mu / it.s) @ ds)
        dphi -= nu * theta0

        alpha = 1.0
        for _ in range(30):
            x_try = it.x + alpha * beta_p * dx
            s_try = it.s + alpha * beta_p * ds
            phi_try, _ = _merit(rp, x_try, s_try, alam, rho, sigma, z, mu, nu)
            if np.isfinite(phi_try) and phi_try <= phi0 + 1e-4 * alpha * min(dphi, 0.0):
                break
            alpha *= 0.5
        # a tiny step is still applied if the merit test never fired; the
        # inertia-corrected direction is a descent direction for the smooth part
        it.x = it.x + alpha * beta_p * dx
        it.s = it.s + alpha * beta_p * ds
        it.kappa = it.kappa + beta_d * dkappa
        it.gamma = it.gamma + alpha * beta_p * dgamma
        it.assert_interior()

    raise LocalSolveError(
        f"region {rp.index}: inner solver hit the {opts.inner_max_iter}-iteration cap "
        f"(residual {decoupled_residual(it):.3e}, tol {tol:.3e})"
    )


def condense_block(rp, it, lam_coupled, reg=(0.0, 0.0)):
    """Condense the local KKT block at the decoupled solution.

    The dual gradient is returned split as h = h0 + mu * h_mu, so the
    coordinator can re-evaluate it after a barrier update without another
    round trip; h0 carries the consensus contribution A x.
    """
    g0, J, R, H = rp.eval_derivatives(it.x, it.s, it.kappa, it.gamma, 0.0)
    alam = rp.a_coupled.T @ lam_coupled
    g0 = g0 + alam
    g_mu = R.T @ (1.0 / it.s)
    ce, _ = rp.eval_constraints(it.x)
    ax = rp.a_coupled @ it.x
    return kkt.condense(H, J, rp.a_coupled, g0, g_mu, ax, ce, reg=reg)


def recover_step(core, dlam_coupled, rp, it, mu):
    """Back-substitute the dual step into the retained factor (full recovery)."""
    dx, dgamma = kkt.recover_from_core(core, dlam_coupled, mu)
    _, ci = rp.eval_constraints(it.x)
    R = rp.ineq.jacobian(it.x)
    ds = -ci - it.s - R @ dx
    dkappa = -it.kappa + (mu - it.kappa * ds) / it.s
    return dx, dgamma, ds, dkappa


def summarize(rp, it, lam_coupled, core, z, sigma, e_mu, e0, inner_iters,
              ref_point=None):
    """Wrap one region's condensation output into the coordinator payload."""
    ce, ci = rp.eval_constraints(it.x)
    block = CondensedBlock(
        region=rp.index,
        e_mu=e_mu,
        e0=e0,
        ax=np.asarray(rp.a_coupled @ it.x),
        w=None if core.w is None else core.w.copy(),
        h0=None if core.h0 is None else core.h0.copy(),
        h_mu=None if core.h_mu is None else core.h_mu.copy(),
        inertia=core.inertia,
        singular=core.singular,
        f_value=rp.eval_objective(it.x),
        viol_eq_l1=float(np.abs(ce).sum()),
        viol_ineq_l1=float(np.abs(ci + it.s).sum()) if len(ci) else 0.0,
        prox_sq=float((it.x - z) @ (sigma * (it.x - z))),
        inner_iters=inner_iters,
    )
    if ref_point is not None:
        x_ref, s_ref = ref_point
        ce_r, ci_r = rp.eval_constraints(x_ref)
        block.ref_f = rp.eval_objective(x_ref)
        block.ref_viol_l1 = float(np.abs(ce_r).sum()) + (
            float(np.abs(ci_r + s_ref).sum()) if len(ci_r) else 0.0
        )
        block.ref_ax = np.asarray(rp.a_coupled @ x_ref)
    return block


def candidate_merit_pieces(rp, x_cand, s_cand):
    """Merit ingredients of a trial point (used by the globalization stages)."""
    ce, ci = rp.eval_constraints(x_cand)
    viol = float(np.abs(ce).sum()) + (float(np.abs(ci + s_cand).sum()) if len(ci) else 0.0)
    return {
        "f": rp.eval_objective(x_cand),
        "viol_l1": viol,
        "ax": np.asarray(rp.a_coupled @ x_cand),
    }


def apply_update(z, it, step, alphas, beta_p, beta_kappa):
    """Blend the decoupled point and the recovered step into the next iterate.

    Returns (z_new, warm) where ``warm`` seeds the next decoupled solve; slack
    and inequality-multiplier positivity is asserted, never assumed.
    """
    a1, a2, a3 = alphas
    dx, dgamma, ds, dkappa = step
    z_new = z + a1 * (it.x - z) + a2 * beta_p * dx
    s_new = it.s + a2 * beta_p * ds
    kappa_new = it.kappa + a2 * beta_kappa * dkappa
    gamma_new = it.gamma + a2 * beta_p * dgamma
    warm = LocalIterate(x=z_new.copy(), s=s_new, gamma=gamma_new, kappa=kappa_new)
    warm.assert_interior()
    return z_new, warm
