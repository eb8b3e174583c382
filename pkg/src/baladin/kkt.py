"""Symmetric indefinite factorization with inertia, solves, and condensation.

The factorization is dense LDL^T with Bunch-Kaufman pivoting (LAPACK sytrf via
scipy).  Inertia is read off the 1x1/2x2 pivot blocks of D, which by
Sylvester's law of inertia matches the eigenvalue sign counts of the input.
Singularity is reported through the inertia triple, never as an exception.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs


class SingularFactorError(RuntimeError):
    pass


@dataclass
class LdlFactor:
    n: int
    inertia: tuple[int, int, int]
    zero_tol: float
    _ldu: np.ndarray   # packed Bunch-Kaufman factor (LAPACK sytrf output)
    _ipiv: np.ndarray
    _matrix: np.ndarray  # retained for one step of iterative refinement
    _scale: np.ndarray | None = None  # equilibration diagonal (inertia-preserving)

    @property
    def singular(self):
        return self.inertia[2] > 0

    def solve(self, rhs, refine=True):
        """Solve K sol = rhs (rhs may be a vector or a matrix of columns)."""
        if self.singular:
            raise SingularFactorError(f"factor is singular, inertia {self.inertia}")
        rhs = np.asarray(rhs, dtype=float)
        sol = self._solve_raw(rhs)
        if refine:
            sol = sol + self._solve_raw(rhs - self._apply(sol))
        return sol

    def _apply(self, x):
        return self._matrix @ x

    def _solve_raw(self, rhs):
        one_d = rhs.ndim == 1
        b = rhs.reshape(self.n, -1)
        if self._scale is not None:
            b = b * self._scale[:, None]
        sytrs = get_lapack_funcs(("sytrs",), (self._ldu,))[0]
        x, info = sytrs(self._ldu, self._ipiv, b, lower=1)
        if info != 0:
            raise SingularFactorError(f"triangular solve failed, info={info}")
        if self._scale is not None:
            x = x * self._scale[:, None]
        return x.ravel() if one_d else x


def _pivot_block_eigs(ldu, ipiv):
    """Eigenvalues of the 1x1/2x2 pivot blocks of a sytrf factorization."""
    n = ldu.shape[0]
    eigs = np.empty(n)
    k = 0
    while k < n:
        if ipiv[k] > 0:
            eigs[k] = ldu[k, k]
            k += 1
        else:
            a, b, c = ldu[k, k], ldu[k + 1, k], ldu[k + 1, k + 1]
            mean = 0.5 * (a + c)
            disc = np.hypot(0.5 * (a - c), b)
            eigs[k] = mean - disc
            eigs[k + 1] = mean + disc
            k += 2
    return eigs


def default_zero_tol(K):
    scale = np.abs(K).max() if K.size else 0.0
    return 1e-11 * scale


def equilibration(K):
    """Symmetric diagonal scaling pulling row norms toward one.  The scaled
    matrix D K D is congruent to K, so its inertia is identical (Sylvester),
    while pivot-magnitude classification no longer depends on the (possibly
    enormous) barrier-induced norm spread."""
    norms = np.abs(K).max(axis=1)
    norms[norms == 0.0] = 1.0
    return 1.0 / np.sqrt(norms)


def ldl_factor(K, zero_tol=None, equilibrate=False):
    """Factor a symmetric matrix; inertia counts pivots |.| <= zero_tol as zero.

    ``equilibrate=True`` classifies pivots on the diagonally scaled congruent
    matrix instead (same inertia, scale-free zero detection); solves are still
    performed for the original matrix, with one refinement step against it.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValueError(f"matrix must be square, got {K.shape}")
    if n == 0:
        return LdlFactor(0, (0, 0, 0), 0.0, np.empty((0, 0)), np.empty(0, dtype=np.int32), K)
    scale = None
    M = K
    if equilibrate:
        scale = equilibration(K)
        M = K * scale[:, None] * scale[None, :]
    if zero_tol is None:
        zero_tol = default_zero_tol(M)
    sytrf, sytrf_lwork = get_lapack_funcs(("sytrf", "sytrf_lwork"), (M,))
    lwork, info = sytrf_lwork(n, lower=1)
    ldu, ipiv, info = sytrf(M, lwork=int(lwork), lower=1)
    if info < 0:
        raise ValueError(f"illegal argument {-info} to the factorization")
    eigs = _pivot_block_eigs(ldu, ipiv)
    n_zero = int(np.sum(np.abs(eigs) <= zero_tol))
    n_pos = int(np.sum(eigs > zero_tol))
    n_neg = n - n_pos - n_zero
    return LdlFactor(
        n=n,
        inertia=(n_pos, n_neg, n_zero),
        zero_tol=zero_tol,
        _ldu=ldu,
        _ipiv=ipiv,
        _matrix=K,
        _scale=scale,
    )


def solve(factor, rhs):
    return factor.solve(rhs)


def assemble_kkt(H, J, delta_x=0.0, delta_gamma=0.0):
    """Bordered symmetric block [[H + dx I, J'], [J, -dg I]]."""
    n_x = H.shape[0]
    n_e = J.shape[0]
    K = np.zeros((n_x + n_e, n_x + n_e))
    K[:n_x, :n_x] = H
    if delta_x:
        K[:n_x, :n_x] += delta_x * np.eye(n_x)
    K[:n_x, n_x:] = J.T
    K[n_x:, :n_x] = J
    if delta_gamma:
        K[n_x:, n_x:] = -delta_gamma * np.eye(n_e)
    return K


def factor_kkt(H, J, delta_x=0.0, delta_gamma=0.0, zero_tol=None):
    return ldl_factor(assemble_kkt(H, J, delta_x, delta_gamma), zero_tol=zero_tol,
                      equilibrate=True)


@dataclass
class CondensedCore:
    """Per-region condensation output plus the retained factor for recovery.

    ``w``, ``h0`` and ``h_mu`` are restricted to the region's coupled consensus
    rows (the nonzero rows of its consensus matrix); zero rows contribute
    nothing and are never formed or transmitted.
    """

    factor: LdlFactor
    inertia: tuple[int, int, int]
    singular: bool
    n_x: int
    n_eq: int
    w: np.ndarray | None
    h0: np.ndarray | None
    h_mu: np.ndarray | None
    gbar0: np.ndarray
    gbar_mu: np.ndarray
    abar_t: np.ndarray  # (n_x + n_eq, n_cpl), zero gamma block

    def hbar_solve(self, rhs):
        return self.factor.solve(rhs)


def condense(H, J, a_coupled, g0, g_mu, ax_coupled, ce, reg=(0.0, 0.0)):
    """Schur-condense one region's KKT block onto its coupled consensus rows.

    Builds the bordered block from (H, J) with regularization ``reg``;
    ``a_coupled`` holds the nonzero rows of the region's consensus matrix over
    the primal variables.  Returns W = -Abar Hbar^-1 Abar', the dual gradient
    split h = h0 + mu*h_mu with h0 containing the consensus contribution
    ``ax_coupled``, and the retained factor for later step recovery.
    """
    delta_x, delta_gamma = reg
    n_x = H.shape[0]
    n_eq = J.shape[0]
    n_cpl = a_coupled.shape[0]
    factor = factor_kkt(H, J, delta_x, delta_gamma)
    gbar0 = np.concatenate([g0, ce])
    gbar_mu = np.concatenate([g_mu, np.zeros(n_eq)])
    abar_t = np.zeros((n_x + n_eq, n_cpl))
    a_dense = a_coupled.toarray() if hasattr(a_coupled, "toarray") else np.asarray(a_coupled)
    abar_t[:n_x] = a_dense.T
    core = CondensedCore(
        factor=factor,
        inertia=factor.inertia,
        singular=factor.singular,
        n_x=n_x,
        n_eq=n_eq,
        w=None,
        h0=None,
        h_mu=None,
        gbar0=gbar0,
        gbar_mu=gbar_mu,
        abar_t=abar_t,
    )
    if factor.singular:
        return core
    rhs = np.concatenate([abar_t, gbar0[:, None], gbar_mu[:, None]], axis=1)
    sol = factor.solve(rhs)
    x_a = sol[:, :n_cpl]
    x_g0 = sol[:, n_cpl]
    x_gmu = sol[:, n_cpl + 1]
    w = -abar_t.T @ x_a
    core.w = 0.5 * (w + w.T)
    core.h0 = ax_coupled - abar_t.T @ x_g0
    core.h_mu = -abar_t.T @ x_gmu
    return core


def recover_from_core(core, dlam_coupled, mu):
    """Back-substitute the coordination step: (dx, dgamma) of the region block."""
    if core.factor.singular:
        raise SingularFactorError("retained factor is singular")
    rhs = core.abar_t @ dlam_coupled + core.gbar0 + mu * core.gbar_mu
    sol = -core.factor.solve(rhs)
    return sol[: core.n_x], sol[core.n_x :]
