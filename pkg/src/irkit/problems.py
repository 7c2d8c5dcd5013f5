"""Desk-scale test-problem catalog.

Each builder returns a :class:`Problem` bundling the semi-discrete system,
a default initial state, an optional exact-solution handle (exact for the
*discrete* operator, so time-integration error is measured alone), and the
field-of-values class of the linearized operator:

* ``dahlquist``     scalar (or 2x2 real form) test equation, exact
* ``heat1d``        Dirichlet 3-point Laplacian, symmetric negative
                    semi-definite, exact via discrete sine modes
* ``advection1d``   periodic central differences, skew-symmetric, exact
                    via circulant modes
* ``advdiff1d``     periodic advection plus diffusion
* ``burgers1d``     conservative flux form with viscosity, exact Jacobian
* ``dae_manufactured``  index-1 scalar pair with closed-form solution
* ``shear_layer_small`` 2D vorticity/streamfunction system on a periodic
                    grid with lagged advection (index-1, zero L_w)

Field-of-values labels are verified at build time: ``snsd`` requires the
symmetric-part bound to be non-positive, ``skew`` requires it to vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dae import DaeSystem
from .errors import ConfigurationError
from .irk_core import field_of_values_bound
from .nonlinear import OdeSystem
from .sparsela import SparseMatrix

FOV_TOL = 1e-8


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    kind: str  # ode-linear | ode-nonlinear | dae-index1
    params: dict = field(default_factory=dict)
    fov_class: str = "general"  # snsd | skew | general


@dataclass(frozen=True)
class Problem:
    spec: ProblemSpec
    system: object  # OdeSystem or DaeSystem
    u0: np.ndarray
    w0: np.ndarray | None = None
    exact: object = None  # exact(t) -> u  (or (u, w) for DAEs)
    operator: SparseMatrix | None = None  # frozen linearization, linear problems
    fov_bound: float | None = None


def _verify_fov(label, lmat):
    bound = field_of_values_bound(lmat)
    if label == "snsd" and bound > FOV_TOL:
        raise ConfigurationError(f"operator labeled snsd has fov bound {bound:.3e}")
    if label == "skew" and abs(bound) > FOV_TOL:
        raise ConfigurationError(f"operator labeled skew has fov bound {bound:.3e}")
    return bound


def dahlquist(lam_re=-1.0, lam_im=0.0):
    """Scalar test equation ``u' = lam * u`` (2x2 real form when complex)."""
    if lam_im == 0.0:
        mat = SparseMatrix(sp.csr_matrix(np.array([[lam_re]])), bandwidth=0)
        u0 = np.array([1.0])

        def exact(t):
            return np.array([np.exp(lam_re * t)])

    else:
        mat = SparseMatrix(
            np.array([[lam_re, -lam_im], [lam_im, lam_re]]), bandwidth=1
        )
        u0 = np.array([1.0, 0.0])

        def exact(t):
            r = np.exp(lam_re * t)
            return r * np.array([np.cos(lam_im * t), np.sin(lam_im * t)])

    system = OdeSystem(
        dim=mat.n,
        rhs=lambda u, t: mat @ u,
        linearize=lambda u, t: mat,
        name="dahlquist",
    )
    spec = ProblemSpec(
        "dahlquist", "ode-linear", {"lam_re": lam_re, "lam_im": lam_im}, "general"
    )
    return Problem(spec, system, u0, exact=exact, operator=mat)


def heat1d(n=64, nu=1.0):
    """Dirichlet heat equation on (0, 1): 3-point Laplacian, SNSD."""
    h = 1.0 / (n + 1)
    lap = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n)) * (nu / h**2)
    mat = SparseMatrix(lap, bandwidth=1)
    x = np.arange(1, n + 1) * h
    modes = [(1, 1.0), (3, 0.5)]
    u0 = sum(a * np.sin(k * np.pi * x) for k, a in modes)
    # Discrete eigenvalues of the 3-point stencil.
    lam = {k: -(4.0 * nu / h**2) * np.sin(0.5 * k * np.pi * h) ** 2 for k, _ in modes}

    def exact(t):
        return sum(a * np.exp(lam[k] * t) * np.sin(k * np.pi * x) for k, a in modes)

    system = OdeSystem(
        dim=n, rhs=lambda u, t: mat @ u, linearize=lambda u, t: mat, name="heat1d"
    )
    spec = ProblemSpec("heat1d", "ode-linear", {"n": n, "nu": nu}, "snsd")
    bound = _verify_fov("snsd", mat)
    return Problem(spec, system, u0, exact=exact, operator=mat, fov_bound=bound)


def _periodic_central(n, h):
    d = sp.lil_matrix((n, n))
    for i in range(n):
        d[i, (i + 1) % n] = 1.0 / (2.0 * h)
        d[i, (i - 1) % n] = -1.0 / (2.0 * h)
    return d.tocsr()


def _periodic_laplacian(n, h):
    d = sp.lil_matrix((n, n))
    for i in range(n):
        d[i, i] = -2.0 / h**2
        d[i, (i + 1) % n] = 1.0 / h**2
        d[i, (i - 1) % n] = 1.0 / h**2
    return d.tocsr()


def advection1d(n=64, speed=1.0):
    """Periodic transport ``u_t = speed * u_x`` with central differences."""
    h = 1.0 / n
    mat = SparseMatrix(speed * _periodic_central(n, h), bandwidth=1)
    x = np.arange(n) * h
    u0 = np.sin(2 * np.pi * x) + 0.3 * np.cos(4 * np.pi * x)
    coeffs = np.fft.fft(u0)
    wavenum = np.fft.fftfreq(n, d=1.0 / n)
    lam = 1j * speed * np.sin(2 * np.pi * wavenum / n) / h

    def exact(t):
        return np.real(np.fft.ifft(coeffs * np.exp(lam * t)))

    system = OdeSystem(
        dim=n, rhs=lambda u, t: mat @ u, linearize=lambda u, t: mat, name="advection1d"
    )
    spec = ProblemSpec("advection1d", "ode-linear", {"n": n, "speed": speed}, "skew")
    bound = _verify_fov("skew", mat)
    return Problem(spec, system, u0, exact=exact, operator=mat, fov_bound=bound)


def advdiff1d(n=64, speed=1.0, nu=0.01):
    """Periodic advection-diffusion (general class; still left half-plane)."""
    h = 1.0 / n
    mat = SparseMatrix(
        speed * _periodic_central(n, h) + nu * _periodic_laplacian(n, h), bandwidth=1
    )
    x = np.arange(n) * h
    u0 = np.sin(2 * np.pi * x) + 0.2 * np.sin(6 * np.pi * x)
    system = OdeSystem(
        dim=n, rhs=lambda u, t: mat @ u, linearize=lambda u, t: mat, name="advdiff1d"
    )
    spec = ProblemSpec(
        "advdiff1d", "ode-linear", {"n": n, "speed": speed, "nu": nu}, "general"
    )
    return Problem(spec, system, u0, operator=mat)


def burgers1d(n=128, nu=0.02, base=0.5, amplitude=0.45):
    """Viscous Burgers on a periodic unit interval, conservative flux form.

    ``N(u) = -D(u^2/2) + nu * Lap u`` with central differences; the exact
    Jacobian ``-D diag(u) + nu * Lap`` is assembled per evaluation.
    """
    h = 1.0 / n
    dmat = _periodic_central(n, h)
    lap = nu * _periodic_laplacian(n, h)
    x = np.arange(n) * h
    u0 = base + amplitude * np.sin(2 * np.pi * x)

    def rhs(u, t):
        return -(dmat @ (0.5 * u * u)) + lap @ u

    def linearize(u, t):
        return SparseMatrix(-(dmat @ sp.diags(u)) + lap, bandwidth=1)

    system = OdeSystem(dim=n, rhs=rhs, linearize=linearize, name="burgers1d")
    spec = ProblemSpec(
        "burgers1d",
        "ode-nonlinear",
        {"n": n, "nu": nu, "base": base, "amplitude": amplitude},
        "general",
    )
    return Problem(spec, system, u0)


def dae_manufactured():
    """Index-1 pair ``u' = -u + w``, ``0 = w - cos t`` with closed form.

    Eliminating ``w`` gives ``u(t) = (cos t + sin t) / 2 + exp(-t) / 2``
    for ``u(0) = 1``.
    """
    lu = SparseMatrix(np.array([[-1.0]]), bandwidth=0)
    lw = SparseMatrix(np.array([[1.0]]), bandwidth=0)
    gu = SparseMatrix(np.array([[0.0]]), bandwidth=0)
    gw = SparseMatrix(np.array([[1.0]]), bandwidth=0)

    system = DaeSystem(
        dim_u=1,
        dim_w=1,
        rhs=lambda u, w, t: -u + w,
        constraint=lambda u, w, t: w - np.cos(t),
        blocks=lambda u, w, t: (lu, lw, gu, gw),
        name="dae_manufactured",
    )

    def exact(t):
        return (
            np.array([0.5 * (np.cos(t) + np.sin(t)) + 0.5 * np.exp(-t)]),
            np.array([np.cos(t)]),
        )

    spec = ProblemSpec("dae_manufactured", "dae-index1", {}, "general")
    return Problem(spec, system, np.array([1.0]), w0=np.array([1.0]), exact=exact)


def _grid_ops_2d(n, length=2.0 * np.pi):
    """Periodic central difference and Laplacian operators on an n x n grid."""
    h = length / n
    d1 = _periodic_central(n, h)
    eye = sp.identity(n, format="csr")
    dx = sp.kron(eye, d1, format="csr")
    dy = sp.kron(d1, eye, format="csr")
    lap1 = _periodic_laplacian(n, h)
    lap = sp.kron(eye, lap1, format="csr") + sp.kron(lap1, eye, format="csr")
    return dx, dy, lap, h


def shear_layer_small(n=16, reynolds=1e4, delta=0.05, rho=np.pi / 15.0):
    """Double shear layer in vorticity/streamfunction form, desk scale.

    The streamfunction solves the pinned periodic Poisson problem
    ``Lap psi = omega`` (one row replaced by ``psi_0 = 0`` to fix the
    nullspace), velocities come from ``(-d_y psi, d_x psi)``, and the
    advection operator is lagged in the linearization so the differential
    rows never couple to the streamfunction (``L_w = 0``).
    """
    dx, dy, lap, h = _grid_ops_2d(n)
    nn = n * n

    # Pinned constraint operator: Lap with row 0 replaced by the identity row.
    pinned = lap.tolil()
    pinned[0, :] = 0.0
    pinned[0, 0] = 1.0
    gw = SparseMatrix(pinned.tocsr(), bandwidth=n)
    neg_eye = sp.identity(nn, format="csr") * (-1.0)
    gu_mat = neg_eye.tolil()
    gu_mat[0, :] = 0.0
    gu = SparseMatrix(gu_mat.tocsr(), bandwidth=0)
    lw = SparseMatrix(sp.csr_matrix((nn, nn)), bandwidth=0)
    visc = (1.0 / reynolds) * lap

    def advection(psi):
        ux = -(dy @ psi)
        uy = dx @ psi
        return -(dx @ sp.diags(ux) + dy @ sp.diags(uy))

    def rhs(omega, psi, t):
        return (advection(psi) @ omega) + visc @ omega

    def constraint(omega, psi, t):
        g = lap @ psi - omega
        g[0] = psi[0]
        return g

    def blocks(omega, psi, t):
        lu = SparseMatrix(advection(psi) + visc, bandwidth=n)
        return lu, lw, gu, gw

    system = DaeSystem(
        dim_u=nn,
        dim_w=nn,
        rhs=rhs,
        constraint=constraint,
        blocks=blocks,
        name="shear_layer_small",
    )

    xs = (np.arange(n) * h)
    xg, yg = np.meshgrid(xs, xs, indexing="xy")
    omega0 = np.where(
        yg.ravel() <= np.pi,
        delta * np.cos(xg.ravel())
        - np.cosh(np.clip((yg.ravel() - np.pi / 2) / rho, -30, 30)) ** -2 / rho,
        delta * np.cos(xg.ravel())
        + np.cosh(np.clip((3 * np.pi / 2 - yg.ravel()) / rho, -30, 30)) ** -2 / rho,
    )
    from .sparsela import BandedLU

    rhs_psi = omega0.copy()
    rhs_psi[0] = 0.0
    psi0 = BandedLU.factor(gw).solve(rhs_psi)
    spec = ProblemSpec(
        "shear_layer_small",
        "dae-index1",
        {"n": n, "reynolds": reynolds, "delta": delta, "rho": rho},
        "general",
    )
    return Problem(spec, system, omega0, w0=psi0)


_BUILDERS = {
    "dahlquist": dahlquist,
    "heat1d": heat1d,
    "advection1d": advection1d,
    "advdiff1d": advdiff1d,
    "burgers1d": burgers1d,
    "dae_manufactured": dae_manufactured,
    "shear_layer_small": shear_layer_small,
}


def problem_names():
    return sorted(_BUILDERS)


def make_problem(name, **params):
    """Build a catalog problem by name; unknown names are configuration errors."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown problem {name!r}; available: {', '.join(problem_names())}"
        ) from None
    return builder(**params)
