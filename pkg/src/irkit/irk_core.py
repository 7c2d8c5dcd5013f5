"""Stage-transformed linear solves: shifted blocks, 2x2 eigen-block systems,
block backward substitution, and conditioning measurements.

After conjugating the stage system with the orthogonal factor of the real
Schur form, one linear stage solve reduces to a backward sweep over the
eigen-blocks of the quasi-triangular factor.  Real eigenvalues give shifted
systems ``eta*M - dt*L``; complex pairs give block 2x2 systems

    [[eta*M - dt*L1,          phi*M - dt*C12],
     [-(beta^2/phi)*M - dt*C21,  eta*M - dt*L2]]

solved by GMRES with a block lower-triangular preconditioner whose second
diagonal block uses the shift ``gamma`` (optimally ``eta + beta^2/eta``).
The coupling terms ``C12``/``C21`` are only present for the richest
linearization variant; the preconditioner always ignores them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import densela
from .errors import StageSolveError
from .sparsela import (
    BandedLU,
    KrylovReport,
    LinearOperator,
    SparseMatrix,
    combine,
    gmres,
)
from .tableau import gamma_star

DENSE_KAPPA_LIMIT = 512


@dataclass(frozen=True)
class PrecondSpec:
    """Shift choice and inner-solver policy for the block preconditioners.

    ``gamma_mode`` is ``"star"`` (optimal shift), ``"eta"`` (naive shift) or
    a positive float.  ``inner`` is ``"exact"`` for factored solves or an
    integer for that many damped-Jacobi sweeps (a stand-in for one cycle of
    an iterative inner preconditioner).
    """

    gamma_mode: object = "star"
    inner: object = "exact"

    def __post_init__(self):
        if isinstance(self.gamma_mode, str):
            if self.gamma_mode not in ("star", "eta"):
                raise ValueError(f"unknown gamma mode {self.gamma_mode!r}")
        elif not (float(self.gamma_mode) > 0.0):
            raise ValueError("custom gamma must be positive")
        if self.inner != "exact" and not (
            isinstance(self.inner, int) and self.inner > 0
        ):
            raise ValueError(f"inner must be 'exact' or a positive int")

    def gamma(self, eta, beta):
        if self.gamma_mode == "star":
            return gamma_star(eta, beta)
        if self.gamma_mode == "eta":
            return eta
        return float(self.gamma_mode)


@dataclass(frozen=True)
class Block2x2System:
    """One complex eigen-block system in mass form.

    ``l1``/``l2`` are the per-row stage operators (unscaled; ``dt`` is
    carried separately).  ``offdiag12``/``offdiag21`` hold the optional
    variant-3 coupling operators.
    """

    eta: float
    beta: float
    phi: float
    mass: SparseMatrix | None
    l1: SparseMatrix
    l2: SparseMatrix
    dt: float
    offdiag12: SparseMatrix | None = None
    offdiag21: SparseMatrix | None = None

    @property
    def n(self):
        return self.l1.n

    def mass_apply(self, x):
        return x if self.mass is None else self.mass @ x


def shifted_matrix(alpha, mass, lmat, dt):
    """Assemble ``alpha * M - dt * L`` as a sparse matrix."""
    return combine([alpha, -dt], [mass, lmat])


class ShiftedSolver:
    """Applies ``(alpha*M - dt*L)^{-1}``, exactly or by damped Jacobi sweeps."""

    def __init__(self, alpha, mass, lmat, dt, inner="exact"):
        self.mat = shifted_matrix(alpha, mass, lmat, dt)
        self.inner = inner
        if inner == "exact":
            self._factor = BandedLU.factor(self.mat)
        else:
            diag = self.mat.csr.diagonal()
            if np.any(diag == 0.0):
                raise ValueError("Jacobi inner solver needs a nonzero diagonal")
            self._invdiag = 1.0 / diag

    def solve(self, r):
        if self.inner == "exact":
            return self._factor.solve(r)
        x = np.zeros_like(r)
        for _ in range(self.inner):
            x = x + (2.0 / 3.0) * (self._invdiag * (r - self.mat @ x))
        return x


def apply_block2x2(sys: Block2x2System, x):
    """Matrix action of the 2x2 eigen-block system on ``x`` (length 2n)."""
    n = sys.n
    x = np.asarray(x, dtype=float)
    if x.shape != (2 * n,):
        raise ValueError(f"x has shape {x.shape}, expected ({2 * n},)")
    x1, x2 = x[:n], x[n:]
    m1, m2 = sys.mass_apply(x1), sys.mass_apply(x2)
    top = sys.eta * m1 - sys.dt * (sys.l1 @ x1) + sys.phi * m2
    bot = -(sys.beta**2 / sys.phi) * m1 + sys.eta * m2 - sys.dt * (sys.l2 @ x2)
    if sys.offdiag12 is not None:
        top -= sys.dt * (sys.offdiag12 @ x2)
    if sys.offdiag21 is not None:
        bot -= sys.dt * (sys.offdiag21 @ x1)
    return np.concatenate([top, bot])


def block2x2_operator(sys: Block2x2System) -> LinearOperator:
    return LinearOperator(2 * sys.n, lambda x: apply_block2x2(sys, x))


def make_block2x2_preconditioner(sys: Block2x2System, spec: PrecondSpec):
    """Block lower-triangular right preconditioner for the 2x2 system.

    Applying it solves ``(eta*M - dt*L1) z1 = r1`` and then
    ``(gamma*M - dt*L2) z2 = r2 + (beta^2/phi) M z1``.  Costs two inner
    solves per application.
    """
    gamma = spec.gamma(sys.eta, sys.beta)
    s1 = ShiftedSolver(sys.eta, sys.mass, sys.l1, sys.dt, spec.inner)
    s2 = ShiftedSolver(gamma, sys.mass, sys.l2, sys.dt, spec.inner)
    n = sys.n
    coupling = sys.beta**2 / sys.phi

    def apply(r):
        z1 = s1.solve(r[:n])
        z2 = s2.solve(r[n:] + coupling * sys.mass_apply(z1))
        return np.concatenate([z1, z2])

    return LinearOperator(2 * n, apply, solves_per_apply=2)


def precond_block2x2(sys: Block2x2System, spec: PrecondSpec, r):
    """One application of the block lower-triangular preconditioner."""
    return make_block2x2_preconditioner(sys, spec)(np.asarray(r, dtype=float))


def exact_schur_preconditioner(sys: Block2x2System):
    """Test hook: the triangular preconditioner with the exact Schur complement.

    Materializes ``S = eta*M - dt*L2 + beta^2 * M (eta*M - dt*L1)^{-1} M``
    densely, so GMRES on the 2x2 block converges in at most two iterations.
    """
    n = sys.n
    if n > DENSE_KAPPA_LIMIT:
        raise ValueError(f"exact Schur hook limited to n <= {DENSE_KAPPA_LIMIT}")
    s1 = ShiftedSolver(sys.eta, sys.mass, sys.l1, sys.dt, "exact")
    m_dense = np.eye(n) if sys.mass is None else sys.mass.to_dense()
    a2 = shifted_matrix(sys.eta, sys.mass, sys.l2, sys.dt).to_dense()
    schur = a2 + sys.beta**2 * (m_dense @ s1.solve(m_dense))
    lu, piv = densela.lu_factor(schur)
    coupling = sys.beta**2 / sys.phi

    def apply(r):
        z1 = s1.solve(r[:n])
        z2 = densela.lu_solve_factored(lu, piv, r[n:] + coupling * sys.mass_apply(z1))
        return np.concatenate([z1, z2])

    return LinearOperator(2 * n, apply, solves_per_apply=2)


@dataclass
class SolveStats:
    """Krylov accounting for one transformed stage solve."""

    reports: list = field(default_factory=list)  # (block_offset, KrylovReport)

    @property
    def krylov_iterations(self):
        return sum(rep.iterations for _, rep in self.reports)

    @property
    def precond_applications(self):
        return sum(rep.precond_applications for _, rep in self.reports)

    def merge(self, other):
        self.reports.extend(other.reports)


def _solve_1x1(eta, lmat, mass, dt, rhs, spec, rtol, maxit, restart):
    op = LinearOperator(
        lmat.n,
        lambda x: eta * (x if mass is None else mass @ x) - dt * (lmat @ x),
    )
    solver = ShiftedSolver(eta, mass, lmat, dt, spec.inner)
    pre = LinearOperator(lmat.n, solver.solve, solves_per_apply=1)
    return gmres(op, rhs, right_precond=pre, rtol=rtol, maxit=maxit, restart=restart)


def solve_transformed_system(
    prep,
    stage_ops=None,
    variant=None,
    dt=None,
    rhs_stages=None,
    mass=None,
    precond=PrecondSpec(),
    krylov_rtol=1e-5,
    krylov_maxit=200,
    restart=200,
    variant_jacobian=None,
):
    """Solve one linearized stage system through the Schur transform.

    ``rhs_stages`` has shape ``(s, n)``.  The right-hand side is rotated by
    ``q.T``, the quasi-triangular block system is solved from the last
    eigen-block upward (1x1 shifted solves and 2x2 block GMRES), and the
    stage increments are recovered with ``q @ r``.

    The block-diagonal approximation of the transformed operator is taken
    from ``variant_jacobian`` when given, otherwise built from
    ``stage_ops`` and ``variant``.  Returns ``(k, SolveStats)``; a
    non-convergent inner solve raises :class:`StageSolveError` carrying the
    block offset and report.
    """
    if variant_jacobian is None:
        from .nonlinear import build_variant_jacobian

        vjac = build_variant_jacobian(prep, stage_ops, variant)
    else:
        vjac = variant_jacobian
    rhs = np.asarray(rhs_stages, dtype=float)
    s = prep.tableau.s
    if rhs.shape[0] != s:
        raise ValueError(f"rhs has {rhs.shape[0]} stage rows, expected {s}")
    if dt is None or dt <= 0.0:
        raise ValueError("dt must be positive")
    q = prep.schur.q
    r0 = prep.schur.r
    g = q.T @ rhs
    y = np.zeros_like(g)
    my = [None] * s  # mass @ y[j], cached once each block is solved
    stats = SolveStats()

    def mass_apply(vec):
        return vec if mass is None else mass @ vec

    for blk in reversed(prep.schur.blocks):
        rows = list(range(blk.offset, blk.offset + blk.size))
        acc = g[rows].copy()
        for local, r_idx in enumerate(rows):
            for j in range(blk.offset + blk.size, s):
                coef = r0[r_idx, j]
                if coef != 0.0:
                    acc[local] -= coef * my[j]
                od = vjac.offdiag.get((r_idx, j))
                if od is not None:
                    acc[local] += dt * (od @ y[j])
        if blk.size == 1:
            sol, rep = _solve_1x1(
                blk.eta,
                vjac.diag[blk.offset],
                mass,
                dt,
                acc[0],
                precond,
                krylov_rtol,
                krylov_maxit,
                restart,
            )
            if not rep.converged:
                raise StageSolveError(
                    f"1x1 block at offset {blk.offset} did not converge",
                    block_offset=blk.offset,
                    report=rep,
                )
            y[rows[0]] = sol
        else:
            sys2 = Block2x2System(
                eta=blk.eta,
                beta=blk.beta,
                phi=blk.phi,
                mass=mass,
                l1=vjac.diag[blk.offset],
                l2=vjac.diag[blk.offset + 1],
                dt=dt,
                offdiag12=vjac.offdiag.get((blk.offset, blk.offset + 1)),
                offdiag21=vjac.offdiag.get((blk.offset + 1, blk.offset)),
            )
            op = block2x2_operator(sys2)
            pre = make_block2x2_preconditioner(sys2, precond)
            sol, rep = gmres(
                op,
                np.concatenate([acc[0], acc[1]]),
                right_precond=pre,
                rtol=krylov_rtol,
                maxit=krylov_maxit,
                restart=restart,
            )
            if not rep.converged:
                raise StageSolveError(
                    f"2x2 block at offset {blk.offset} did not converge",
                    block_offset=blk.offset,
                    report=rep,
                )
            n = sys2.n
            y[rows[0]] = sol[:n]
            y[rows[1]] = sol[n:]
        for r_idx in rows:
            my[r_idx] = mass_apply(y[r_idx])
        stats.reports.append((blk.offset, rep))
    k = (q @ r0) @ y
    return k, stats


def field_of_values_bound(l: SparseMatrix, rtol=1e-8, maxit=50000):
    """Largest eigenvalue of the symmetric part ``(L + L^T) / 2``.

    Power iteration on the Gershgorin-shifted symmetric part with a
    Rayleigh-quotient readout; the result is accurate to ``rtol`` relative
    to the symmetric part's norm.  A non-positive return certifies that the
    field of values lies in the closed left half-plane.
    """
    sym = SparseMatrix((l.csr + l.csr.T) * 0.5)
    n = sym.n
    norm = np.abs(sym.csr).sum(axis=1).max() if sym.nnz else 0.0
    norm = float(norm)
    if norm == 0.0:
        return 0.0
    v = np.ones(n) + np.linspace(0.0, 0.5, n)
    v /= np.linalg.norm(v)
    lam = float(v @ (sym @ v))
    for _ in range(maxit):
        w = norm * v + sym @ v
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return 0.0  # v in the nullspace of the shifted operator
        v = w / wn
        sv = sym @ v
        lam = float(v @ sv)
        if np.linalg.norm(sv - lam * v) <= rtol * norm:
            break
    return lam


def measure_kappa(eta, beta, lhat1, lhat2, gamma=None):
    """Two-norm condition number of the shift-preconditioned Schur complement.

    ``lhat1``/``lhat2`` are the already scaled stage operators (time step
    folded in, identity mass).  Materializes
    ``P = [eta*I - L2 + beta^2 (eta*I - L1)^{-1}] (gamma*I - L2)^{-1}``
    column by column and runs the Jacobi SVD on it.
    """
    n = lhat1.n
    if n > DENSE_KAPPA_LIMIT:
        raise ValueError(f"measure_kappa limited to n <= {DENSE_KAPPA_LIMIT}")
    if gamma is None:
        gamma = gamma_star(eta, beta)
    s2 = ShiftedSolver(gamma, None, lhat2, 1.0, "exact")
    s1 = ShiftedSolver(eta, None, lhat1, 1.0, "exact")
    x = s2.solve(np.eye(n))
    p = eta * x - lhat2.csr @ x + beta**2 * s1.solve(x)
    return densela.cond2(p)


def measure_kappa_system(sys: Block2x2System, spec: PrecondSpec):
    """Condition measurement for a block system (identity mass only)."""
    if sys.mass is not None:
        raise ValueError("conditioning measurement assumes identity mass")
    lhat1 = combine([sys.dt], [sys.l1])
    lhat2 = combine([sys.dt], [sys.l2])
    return measure_kappa(
        sys.eta, sys.beta, lhat1, lhat2, gamma=spec.gamma(sys.eta, sys.beta)
    )
