"""Index-1 differential-algebraic stage solves and time stepping.

Systems have the form ``M u' = N(u, w, t)``, ``0 = G(u, w, t)`` with an
invertible constraint Jacobian ``G_w``.  The stage system couples the
differential stage vectors ``k_i`` with algebraic stage vectors ``l_i``;
after the Schur transform the diagonal blocks are 2x2 composite systems
(real eigenvalue) or 4x4 composite systems (complex pair), in mass form:

    [[eta*M - dt*Lu1, -dt*Lw1,      phi*M,          0     ],
     [-dt*Gu1,        -dt*Gw1,      0,              0     ],
     [-(b^2/phi)*M,   0,            eta*M - dt*Lu2, -dt*Lw2],
     [0,              0,            -dt*Gu2,        -dt*Gw2]]

Two solution orderings are available.  The coupled mode runs GMRES on the
full block with a triangular preconditioner that eliminates the algebraic
rows through exact constraint solves.  The reordered mode applies when the
differential rows do not couple to the algebraic variable (``Lw = 0``, as
in a lagged advection/streamfunction splitting): the differential 2x2 is
solved first, then the two constraint solves are independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import densela
from .errors import (
    ConfigurationError,
    IndexViolationError,
    SingularMatrixError,
    StageSolveError,
    StepFailureError,
)
from .irk_core import (
    Block2x2System,
    PrecondSpec,
    ShiftedSolver,
    SolveStats,
    block2x2_operator,
    make_block2x2_preconditioner,
    shifted_matrix,
)
from .nonlinear import SolverConfig, StepStats, variant_weights
from .sparsela import BandedLU, LinearOperator, SparseMatrix, combine, gmres
from .tableau import SDIRK_FAMILIES, prepare_stages


@dataclass(frozen=True)
class DaeSystem:
    """Semi-discrete DAE ``M u' = N(u, w, t)``, ``0 = G(u, w, t)``.

    ``blocks(u, w, t)`` returns the four linearized blocks
    ``(L_u, L_w, G_u, G_w)`` as sparse matrices, fixed per stage row.
    """

    dim_u: int
    dim_w: int
    rhs: object
    constraint: object
    blocks: object
    mass: SparseMatrix | None = None
    name: str = ""


class DaeOps(NamedTuple):
    lu: SparseMatrix
    lw: SparseMatrix
    gu: SparseMatrix
    gw: SparseMatrix


@dataclass
class DaeStageState:
    k: np.ndarray  # (s, dim_u)
    ell: np.ndarray  # (s, dim_w)
    u: np.ndarray
    w: np.ndarray
    t: float
    dt: float


@dataclass
class DaeCounters:
    """Inner-solver applications split by block type."""

    differential: int = 0
    constraint: int = 0


def dae_stage_residual(sys: DaeSystem, st: DaeStageState, tableau):
    """Composite residual: ``N(U_i, W_i, t_i) - M k_i`` and ``G(U_i, W_i, t_i)``."""
    u_stage = st.u[None, :] + st.dt * (tableau.a0 @ st.k)
    w_stage = st.w[None, :] + st.dt * (tableau.a0 @ st.ell)
    out = np.empty((tableau.s, sys.dim_u + sys.dim_w))
    for i in range(tableau.s):
        ti = st.t + tableau.c0[i] * st.dt
        diff = sys.rhs(u_stage[i], w_stage[i], ti)
        diff = diff - (st.k[i] if sys.mass is None else sys.mass @ st.k[i])
        out[i, : sys.dim_u] = diff
        out[i, sys.dim_u :] = sys.constraint(u_stage[i], w_stage[i], ti)
    return out


class _ConstraintSolver:
    """Factored solves with the constraint block ``G_w``."""

    def __init__(self, gw: SparseMatrix, counters: DaeCounters):
        self.nw = gw.n
        self.counters = counters
        if self.nw:
            try:
                self._factor = BandedLU.factor(gw)
            except SingularMatrixError as exc:
                raise IndexViolationError(
                    f"constraint Jacobian is singular: {exc}"
                ) from exc

    def solve(self, r):
        if self.nw == 0:
            return np.zeros_like(r)
        self.counters.constraint += 1 if np.ndim(r) == 1 else np.shape(r)[1]
        return self._factor.solve(r)


class _ReducedSolver:
    """Solves ``alpha*M - dt*(L_u - L_w G_w^{-1} G_u)`` exactly.

    Banded when ``L_w`` vanishes; otherwise the constraint elimination is
    materialized densely (desk-scale dimensions only).
    """

    def __init__(self, alpha, ops: DaeOps, dt, mass, counters: DaeCounters,
                 constraint: _ConstraintSolver):
        self.counters = counters
        if ops.lw.nnz == 0 or ops.gu.n == 0:
            self._solver = ShiftedSolver(alpha, mass, ops.lu, dt, "exact")
            self._dense = None
        else:
            gu_dense = ops.gu.to_dense()
            x = constraint._factor.solve(gu_dense)
            red = shifted_matrix(alpha, mass, ops.lu, dt).to_dense()
            red += dt * (ops.lw.to_dense() @ x)
            self._dense = densela.lu_factor(red)
            self._solver = None

    def solve(self, r):
        self.counters.differential += 1 if np.ndim(r) == 1 else np.shape(r)[1]
        if self._dense is None:
            return self._solver.solve(r)
        lu, piv = self._dense
        return densela.lu_solve_factored(lu, piv, r)


def _composite_matvec(ops: DaeOps, eta_or_alpha, mass, dt, xu, xw):
    """Action of ``[[a*M - dt*Lu, -dt*Lw], [-dt*Gu, -dt*Gw]]`` on ``(xu, xw)``."""
    mu = xu if mass is None else mass @ xu
    top = eta_or_alpha * mu - dt * (ops.lu @ xu) - dt * (ops.lw @ xw)
    bot = -dt * (ops.gu @ xu) - dt * (ops.gw @ xw)
    return top, bot


def _split(x, nu, nw):
    return x[:nu], x[nu : nu + nw]


def solve_dae_block2x2(ops, eta, dt, mass, rhs, spec, counters, rtol, maxit, restart):
    """Real-eigenvalue composite block: GMRES with elimination preconditioning."""
    nu, nw = ops.lu.n, ops.gw.n
    n = nu + nw
    constraint = _ConstraintSolver(ops.gw, counters)
    reduced = _ReducedSolver(eta, ops, dt, mass, counters, constraint)
    has_lw = ops.lw.nnz > 0

    def apply_op(x):
        xu, xw = _split(x, nu, nw)
        top, bot = _composite_matvec(ops, eta, mass, dt, xu, xw)
        return np.concatenate([top, bot])

    def apply_pre(r):
        ru, rw = _split(r, nu, nw)
        rhs_u = ru - ops.lw @ constraint.solve(rw) if has_lw else ru
        zu = reduced.solve(rhs_u)
        zw = -constraint.solve(rw + dt * (ops.gu @ zu)) / dt if nw else rw[:0]
        return np.concatenate([zu, zw])

    op = LinearOperator(n, apply_op)
    pre = LinearOperator(n, apply_pre, solves_per_apply=1)
    return gmres(op, rhs, right_precond=pre, rtol=rtol, maxit=maxit, restart=restart)


def solve_dae_block4x4(
    ops_i: DaeOps,
    ops_j: DaeOps,
    eta,
    beta,
    phi,
    dt,
    rhs,
    mode="coupled",
    mass=None,
    spec=PrecondSpec(),
    counters=None,
    rtol=1e-5,
    maxit=200,
    restart=200,
    offdiag=None,
):
    """Solve one complex-pair composite block; returns ``(x, report)``.

    ``rhs`` stacks ``(f_i, g_i, f_j, g_j)``.  ``mode`` is ``"coupled"`` or
    ``"reordered"``; the reordered forward substitution requires both
    ``L_w`` blocks to vanish structurally.  Both modes recheck the true
    residual against ``rtol`` and raise :class:`StageSolveError` otherwise.
    ``offdiag`` optionally carries variant-3 coupling operators
    ``{(0, 1): DaeOps, (1, 0): DaeOps}`` acting between the two stage rows;
    the reordered ordering drops them (its triangular structure assumes the
    lumped or weighted block-diagonal linearization), so there the outer
    nonlinear iteration absorbs any coupling mismatch.
    """
    if counters is None:
        counters = DaeCounters()
    nu, nw = ops_i.lu.n, ops_i.gw.n
    n = nu + nw
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (2 * n,):
        raise ValueError(f"rhs has shape {rhs.shape}, expected ({2 * n},)")
    offdiag = offdiag or {}
    if mode == "reordered":
        offdiag = {}

    def mass_apply(x):
        return x if mass is None else mass @ x

    def apply_full(x):
        x1u, x1w = _split(x[:n], nu, nw)
        x2u, x2w = _split(x[n:], nu, nw)
        top1, bot1 = _composite_matvec(ops_i, eta, mass, dt, x1u, x1w)
        top2, bot2 = _composite_matvec(ops_j, eta, mass, dt, x2u, x2w)
        top1 = top1 + phi * mass_apply(x2u)
        top2 = top2 - (beta**2 / phi) * mass_apply(x1u)
        if (0, 1) in offdiag:
            od = offdiag[(0, 1)]
            top1 -= dt * (od.lu @ x2u) + dt * (od.lw @ x2w)
            bot1 -= dt * (od.gu @ x2u) + dt * (od.gw @ x2w)
        if (1, 0) in offdiag:
            od = offdiag[(1, 0)]
            top2 -= dt * (od.lu @ x1u) + dt * (od.lw @ x1w)
            bot2 -= dt * (od.gu @ x1u) + dt * (od.gw @ x1w)
        return np.concatenate([top1, bot1, top2, bot2])

    if mode == "reordered":
        if ops_i.lw.nnz or ops_j.lw.nnz:
            raise ConfigurationError(
                "reordered mode requires structurally zero L_w blocks"
            )
        sys2 = Block2x2System(
            eta=eta, beta=beta, phi=phi, mass=mass,
            l1=ops_i.lu, l2=ops_j.lu, dt=dt,
        )
        rdiff = np.concatenate([rhs[:nu], rhs[n : n + nu]])
        sol, rep = gmres(
            block2x2_operator(sys2),
            rdiff,
            right_precond=make_block2x2_preconditioner(sys2, spec),
            rtol=rtol,
            maxit=maxit,
            restart=restart,
        )
        counters.differential += rep.precond_applications
        k1, k2 = sol[:nu], sol[nu:]
        c1 = _ConstraintSolver(ops_i.gw, counters)
        c2 = _ConstraintSolver(ops_j.gw, counters)
        l1 = -c1.solve(rhs[nu:n] + dt * (ops_i.gu @ k1)) / dt if nw else rhs[:0]
        l2 = -c2.solve(rhs[n + nu :] + dt * (ops_j.gu @ k2)) / dt if nw else rhs[:0]
        x = np.concatenate([k1, l1, k2, l2])
    elif mode == "coupled":
        constraint1 = _ConstraintSolver(ops_i.gw, counters)
        constraint2 = _ConstraintSolver(ops_j.gw, counters)
        gamma = spec.gamma(eta, beta)
        red1 = _ReducedSolver(eta, ops_i, dt, mass, counters, constraint1)
        red2 = _ReducedSolver(gamma, ops_j, dt, mass, counters, constraint2)
        has_lw1 = ops_i.lw.nnz > 0
        has_lw2 = ops_j.lw.nnz > 0

        def apply_pre(r):
            r1u, r1w = _split(r[:n], nu, nw)
            r2u, r2w = _split(r[n:], nu, nw)
            rhs1 = r1u - ops_i.lw @ constraint1.solve(r1w) if has_lw1 else r1u
            z1u = red1.solve(rhs1)
            z1w = -constraint1.solve(r1w + dt * (ops_i.gu @ z1u)) / dt if nw else r1w
            r2u = r2u + (beta**2 / phi) * mass_apply(z1u)
            rhs2 = r2u - ops_j.lw @ constraint2.solve(r2w) if has_lw2 else r2u
            z2u = red2.solve(rhs2)
            z2w = -constraint2.solve(r2w + dt * (ops_j.gu @ z2u)) / dt if nw else r2w
            return np.concatenate([z1u, z1w, z2u, z2w])

        op = LinearOperator(2 * n, apply_full)
        pre = LinearOperator(2 * n, apply_pre, solves_per_apply=2)
        x, rep = gmres(op, rhs, right_precond=pre, rtol=rtol, maxit=maxit, restart=restart)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")

    rnorm = np.linalg.norm(rhs)
    if rnorm > 0.0:
        true_rel = np.linalg.norm(rhs - apply_full(x)) / rnorm
        if true_rel > rtol:
            raise StageSolveError(
                f"composite block residual {true_rel:.3e} above rtol {rtol:.3e}",
                report=rep,
            )
    return x, rep


def _build_dae_variant(prep, stage_ops, variant, variant0_stage):
    """Componentwise weighted sums of the composite stage operators."""
    s = prep.tableau.s
    dw, ow = variant_weights(prep, variant, variant0_stage)

    def comb(weights):
        return DaeOps(
            lu=combine(weights, [op.lu for op in stage_ops]),
            lw=combine(weights, [op.lw for op in stage_ops]),
            gu=combine(weights, [op.gu for op in stage_ops]),
            gw=combine(weights, [op.gw for op in stage_ops]),
        )

    diag = tuple(comb(dw[i]) for i in range(s))
    offdiag = {key: comb(w) for key, w in ow.items()}
    return diag, offdiag


def _solve_dae_transformed(prep, diag, offdiag, mass, dt, rhs, cfg, counters, mode):
    """Backward block sweep of the transformed composite stage system."""
    s = prep.tableau.s
    nu = diag[0].lu.n
    nw = diag[0].gw.n
    n = nu + nw
    q = prep.schur.q
    r0 = prep.schur.r
    g = q.T @ rhs
    y = np.zeros_like(g)
    mk = [None] * s  # mass @ (differential part of y_j)
    stats = SolveStats()
    for blk in reversed(prep.schur.blocks):
        rows = list(range(blk.offset, blk.offset + blk.size))
        acc = g[rows].copy()
        for local, r_idx in enumerate(rows):
            for j in range(blk.offset + blk.size, s):
                coef = r0[r_idx, j]
                if coef != 0.0:
                    acc[local, :nu] -= coef * mk[j]
                od = offdiag.get((r_idx, j))
                if od is not None:
                    xu, xw = y[j, :nu], y[j, nu:]
                    acc[local, :nu] += dt * (od.lu @ xu) + dt * (od.lw @ xw)
                    acc[local, nu:] += dt * (od.gu @ xu) + dt * (od.gw @ xw)
        if blk.size == 1:
            sol, rep = solve_dae_block2x2(
                diag[blk.offset],
                blk.eta,
                dt,
                mass,
                acc[0],
                cfg.precond,
                counters,
                cfg.krylov_rtol,
                cfg.krylov_maxit,
                cfg.restart,
            )
            if not rep.converged:
                raise StageSolveError(
                    f"composite 1x1 block at offset {blk.offset} did not converge",
                    block_offset=blk.offset,
                    report=rep,
                )
            y[rows[0]] = sol
        else:
            pair_off = {
                key_local: offdiag[key]
                for key_local, key in (
                    ((0, 1), (blk.offset, blk.offset + 1)),
                    ((1, 0), (blk.offset + 1, blk.offset)),
                )
                if key in offdiag
            }
            sol, rep = solve_dae_block4x4(
                diag[blk.offset],
                diag[blk.offset + 1],
                blk.eta,
                blk.beta,
                blk.phi,
                dt,
                np.concatenate([acc[0], acc[1]]),
                mode=mode,
                mass=mass,
                spec=cfg.precond,
                counters=counters,
                rtol=cfg.krylov_rtol,
                maxit=cfg.krylov_maxit,
                restart=cfg.restart,
                offdiag=pair_off,
            )
            if not rep.converged:
                raise StageSolveError(
                    f"composite 2x2 block at offset {blk.offset} did not converge",
                    block_offset=blk.offset,
                    report=rep,
                )
            y[rows[0]] = sol[:n]
            y[rows[1]] = sol[n:]
        for r_idx in rows:
            ku = y[r_idx, :nu]
            mk[r_idx] = ku if mass is None else mass @ ku
        stats.reports.append((blk.offset, rep))
    x = (q @ r0) @ y
    return x, stats


def dae_newton_step(sys: DaeSystem, st: DaeStageState, prep, cfg: SolverConfig,
                    mode="coupled"):
    """Preconditioned Richardson iteration on the composite stage residual."""
    tableau = prep.tableau
    stats = StepStats()
    counters = DaeCounters()
    tic = time.perf_counter()
    res = dae_stage_residual(sys, st, tableau)
    f0 = np.linalg.norm(res)
    stats.residual_history.append(f0)
    tol = max(cfg.newton_rtol * f0, cfg.newton_abs_floor)
    ops = None
    diag = offdiag = None
    nu = sys.dim_u
    while stats.newton_iterations < cfg.newton_maxit:
        if np.linalg.norm(res) <= tol:
            stats.converged = True
            break
        if ops is None or cfg.jacobian_refresh == "every":
            u_stage = st.u[None, :] + st.dt * (tableau.a0 @ st.k)
            w_stage = st.w[None, :] + st.dt * (tableau.a0 @ st.ell)
            ops = [
                DaeOps(*sys.blocks(u_stage[i], w_stage[i], st.t + tableau.c0[i] * st.dt))
                for i in range(tableau.s)
            ]
            stats.jacobian_assemblies += tableau.s
            diag, offdiag = _build_dae_variant(prep, ops, cfg.variant, cfg.variant0_stage)
        dx, solve_stats = _solve_dae_transformed(
            prep, diag, offdiag, sys.mass, st.dt, res, cfg, counters, mode
        )
        st.k = st.k + dx[:, :nu]
        st.ell = st.ell + dx[:, nu:]
        stats.newton_iterations += 1
        stats.add_solve(solve_stats)
        res = dae_stage_residual(sys, st, tableau)
        stats.residual_history.append(np.linalg.norm(res))
    else:
        if np.linalg.norm(res) > tol:
            stats.wall_time = time.perf_counter() - tic
            raise StepFailureError(
                f"DAE stage solve stalled after {cfg.newton_maxit} iterations "
                f"(residual {np.linalg.norm(res):.3e}, tol {tol:.3e})",
                stats=stats,
            )
        stats.converged = True
    stats.wall_time = time.perf_counter() - tic
    stats.differential_solves = counters.differential
    stats.constraint_solves = counters.constraint
    return st, stats, counters


def dae_step(sys: DaeSystem, u, w, t, dt, tableau, cfg=SolverConfig(), prep=None,
             mode="coupled"):
    """One DAE step; returns ``(u_next, w_next, StepStats)``."""
    if tableau.family in SDIRK_FAMILIES:
        raise ConfigurationError(
            "DIRK tableaux are not supported on DAE systems; use a fully "
            "implicit collocation scheme"
        )
    if prep is None:
        prep = prepare_stages(tableau)
    st = DaeStageState(
        k=np.zeros((tableau.s, sys.dim_u)),
        ell=np.zeros((tableau.s, sys.dim_w)),
        u=np.asarray(u, dtype=float),
        w=np.asarray(w, dtype=float),
        t=t,
        dt=dt,
    )
    st, stats, _ = dae_newton_step(sys, st, prep, cfg, mode=mode)
    u_next = st.u + dt * (tableau.b0 @ st.k)
    w_next = st.w + dt * (tableau.b0 @ st.ell)
    stats.constraint_residual = float(
        np.linalg.norm(sys.constraint(u_next, w_next, t + dt))
    )
    return u_next, w_next, stats


@dataclass
class DaeIntegrationResult:
    times: np.ndarray
    u_states: list
    w_states: list
    step_stats: list

    @property
    def u_final(self):
        return self.u_states[-1]

    @property
    def w_final(self):
        return self.w_states[-1]

    def total(self, attr):
        return sum(getattr(s, attr) for s in self.step_stats)


def dae_integrate(sys: DaeSystem, u0, w0, t0, t_final, dt, tableau,
                  cfg=SolverConfig(), mode="coupled"):
    """Fixed-step DAE march.

    The initial state must satisfy the constraint to 1e-10; a failing step
    raises :class:`StepFailureError` with the partial trajectories attached.
    """
    g0 = np.linalg.norm(sys.constraint(np.asarray(u0, float), np.asarray(w0, float), t0))
    if g0 > 1e-10:
        raise ConfigurationError(
            f"inconsistent initial condition: |G(u0, w0, t0)| = {g0:.3e}"
        )
    span = t_final - t0
    nsteps_f = span / dt
    nsteps = int(round(nsteps_f))
    if abs(nsteps_f - nsteps) > 1e-8 * max(1.0, abs(nsteps_f)):
        raise ConfigurationError(
            f"(t_final - t0)/dt = {nsteps_f} is not an integer step count"
        )
    prep = prepare_stages(tableau)
    u = np.array(u0, dtype=float)
    w = np.array(w0, dtype=float)
    times = [t0]
    u_states = [u.copy()]
    w_states = [w.copy()]
    step_stats = []
    for j in range(nsteps):
        t = t0 + j * dt
        try:
            u, w, stats = dae_step(sys, u, w, t, dt, tableau, cfg, prep=prep, mode=mode)
        except StepFailureError as exc:
            exc.partial = DaeIntegrationResult(
                times=np.array(times),
                u_states=u_states,
                w_states=w_states,
                step_stats=step_stats,
            )
            raise
        times.append(t0 + (j + 1) * dt)
        u_states.append(u.copy())
        w_states.append(w.copy())
        step_stats.append(stats)
    return DaeIntegrationResult(
        times=np.array(times), u_states=u_states, w_states=w_states, step_stats=step_stats
    )
