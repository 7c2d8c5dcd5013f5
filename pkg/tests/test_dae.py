import numpy as np
import pytest
import scipy.sparse as sp

from irkit.dae import (
    DaeCounters,
    DaeOps,
    DaeStageState,
    DaeSystem,
    dae_integrate,
    dae_stage_residual,
    dae_step,
    solve_dae_block4x4,
)
from irkit.errors import ConfigurationError, IndexViolationError
from irkit.nonlinear import SolverConfig, integrate
from irkit.problems import make_problem
from irkit.sparsela import SparseMatrix
from irkit.tableau import make_tableau

TIGHT = SolverConfig(newton_rtol=1e-11, krylov_rtol=1e-12)


def random_ops(rng, nu, nw, lw_zero=False):
    lu = SparseMatrix(rng.standard_normal((nu, nu)) - 3 * np.eye(nu))
    lw = SparseMatrix(
        np.zeros((nu, nw)) if lw_zero else 0.3 * rng.standard_normal((nu, nw))
    )
    gu = SparseMatrix(0.5 * rng.standard_normal((nw, nu)))
    gw = SparseMatrix(rng.standard_normal((nw, nw)) + 4 * np.eye(nw))
    return DaeOps(lu, lw, gu, gw)


def dense_pair_block(oi, oj, eta, beta, phi, dt, nu, nw):
    n = nu + nw
    z = np.zeros((2 * n, 2 * n))

    def fill(ops, r0, c0, alpha):
        z[r0 : r0 + nu, c0 : c0 + nu] = alpha * np.eye(nu) - dt * ops.lu.to_dense()
        z[r0 : r0 + nu, c0 + nu : c0 + n] = -dt * ops.lw.to_dense()
        z[r0 + nu : r0 + n, c0 : c0 + nu] = -dt * ops.gu.to_dense()
        z[r0 + nu : r0 + n, c0 + nu : c0 + n] = -dt * ops.gw.to_dense()

    fill(oi, 0, 0, eta)
    fill(oj, n, n, eta)
    z[0:nu, n : n + nu] += phi * np.eye(nu)
    z[n : n + nu, 0:nu] += -(beta**2 / phi) * np.eye(nu)
    return z


class TestResidual:
    def test_zero_at_exact_linear_stage_solution(self):
        # linear DAE; stage vectors from the dense coupled system
        rng = np.random.default_rng(0)
        nu = nw = 2
        ops = random_ops(rng, nu, nw)
        tableau = make_tableau("radau_iia", 2)
        u0 = rng.standard_normal(nu)
        w0 = np.linalg.solve(ops.gw.to_dense(), -(ops.gu.to_dense() @ u0))
        sys = DaeSystem(
            dim_u=nu,
            dim_w=nw,
            rhs=lambda u, w, t: ops.lu @ u + ops.lw @ w,
            constraint=lambda u, w, t: ops.gu @ u + ops.gw @ w,
            blocks=lambda u, w, t: ops,
        )
        dt = 0.1
        s = tableau.s
        n = nu + nw
        big = np.zeros((s * n, s * n))
        rhs = np.zeros(s * n)
        base = np.concatenate([ops.lu @ u0 + ops.lw @ w0, ops.gu @ u0 + ops.gw @ w0])
        lin = np.block(
            [[ops.lu.to_dense(), ops.lw.to_dense()], [ops.gu.to_dense(), ops.gw.to_dense()]]
        )
        mbar = np.zeros((n, n))
        mbar[:nu, :nu] = np.eye(nu)
        for i in range(s):
            rhs[i * n : (i + 1) * n] = base
            for j in range(s):
                blk = -dt * tableau.a0[i, j] * lin
                if i == j:
                    blk = blk + mbar
                big[i * n : (i + 1) * n, j * n : (j + 1) * n] = blk
        x = np.linalg.solve(big, rhs).reshape(s, n)
        st = DaeStageState(
            k=x[:, :nu].copy(), ell=x[:, nu:].copy(), u=u0, w=w0, t=0.0, dt=dt
        )
        res = dae_stage_residual(sys, st, tableau)
        assert np.max(np.abs(res)) <= 1e-12

    def test_zero_guess_evaluates_base_state(self):
        problem = make_problem("dae_manufactured")
        tableau = make_tableau("radau_iia", 2)
        st = DaeStageState(
            k=np.zeros((2, 1)), ell=np.zeros((2, 1)),
            u=problem.u0, w=problem.w0, t=0.0, dt=0.1,
        )
        res = dae_stage_residual(problem.system, st, tableau)
        for i, ci in enumerate(tableau.c0):
            assert res[i, 0] == pytest.approx(-1.0 + 1.0)  # -u0 + w0
            assert res[i, 1] == pytest.approx(1.0 - np.cos(0.1 * ci), abs=1e-14)

    def test_single_stage_hand_values(self):
        problem = make_problem("dae_manufactured")
        tableau = make_tableau("radau_iia", 1)
        st = DaeStageState(
            k=np.zeros((1, 1)), ell=np.zeros((1, 1)),
            u=np.array([2.0]), w=np.array([0.5]), t=0.0, dt=0.2,
        )
        res = dae_stage_residual(problem.system, st, tableau)
        assert res[0, 0] == pytest.approx(-2.0 + 0.5, abs=1e-14)
        assert res[0, 1] == pytest.approx(0.5 - np.cos(0.2), abs=1e-14)


class TestBlockSolve:
    def test_beta_zero_matches_dense(self):
        rng = np.random.default_rng(1)
        nu = nw = 3
        oi, oj = random_ops(rng, nu, nw), random_ops(rng, nu, nw)
        rhs = rng.standard_normal(2 * (nu + nw))
        z = dense_pair_block(oi, oj, 2.0, 0.0, 0.8, 0.25, nu, nw)
        oracle = np.linalg.solve(z, rhs)
        x, rep = solve_dae_block4x4(
            oi, oj, 2.0, 0.0, 0.8, 0.25, rhs, mode="coupled", rtol=1e-12, maxit=100
        )
        assert np.max(np.abs(x - oracle)) < 1e-9

    @pytest.mark.parametrize("mode", ["coupled", "reordered"])
    def test_lw_zero_modes_agree_with_dense(self, mode):
        rng = np.random.default_rng(2)
        nu = nw = 3
        oi = random_ops(rng, nu, nw, lw_zero=True)
        oj = random_ops(rng, nu, nw, lw_zero=True)
        rhs = rng.standard_normal(2 * (nu + nw))
        z = dense_pair_block(oi, oj, 2.0, 1.3, 0.8, 0.25, nu, nw)
        oracle = np.linalg.solve(z, rhs)
        x, _ = solve_dae_block4x4(
            oi, oj, 2.0, 1.3, 0.8, 0.25, rhs, mode=mode, rtol=1e-12, maxit=100
        )
        assert np.max(np.abs(x - oracle)) < 1e-9

    def test_lw_coupled_matches_dense(self):
        rng = np.random.default_rng(3)
        nu = nw = 4
        oi, oj = random_ops(rng, nu, nw), random_ops(rng, nu, nw)
        rhs = rng.standard_normal(2 * (nu + nw))
        z = dense_pair_block(oi, oj, 1.5, 2.0, -0.6, 0.3, nu, nw)
        oracle = np.linalg.solve(z, rhs)
        x, _ = solve_dae_block4x4(
            oi, oj, 1.5, 2.0, -0.6, 0.3, rhs, mode="coupled", rtol=1e-12, maxit=200
        )
        assert np.max(np.abs(x - oracle)) < 1e-8

    def test_reordered_counts_one_diff_solve_two_constraint_solves(self):
        rng = np.random.default_rng(4)
        nu = nw = 3
        oi = random_ops(rng, nu, nw, lw_zero=True)
        oj = random_ops(rng, nu, nw, lw_zero=True)
        rhs = rng.standard_normal(2 * (nu + nw))
        cnt = DaeCounters()
        _, rep = solve_dae_block4x4(
            oi, oj, 2.0, 1.3, 0.8, 0.25, rhs, mode="reordered",
            counters=cnt, rtol=1e-11, maxit=100,
        )
        assert cnt.constraint == 2
        assert cnt.differential == rep.precond_applications

    def test_reordered_requires_structural_zero(self):
        rng = np.random.default_rng(5)
        oi = random_ops(rng, 3, 3)
        with pytest.raises(ConfigurationError):
            solve_dae_block4x4(
                oi, oi, 2.0, 1.3, 0.8, 0.25, np.ones(12), mode="reordered"
            )

    def test_singular_constraint_is_index_violation(self):
        rng = np.random.default_rng(6)
        oi = random_ops(rng, 2, 2, lw_zero=True)
        bad = DaeOps(oi.lu, oi.lw, oi.gu, SparseMatrix(np.zeros((2, 2))))
        with pytest.raises(IndexViolationError):
            solve_dae_block4x4(
                bad, bad, 2.0, 1.3, 0.8, 0.25, np.ones(8), mode="coupled"
            )

    def test_unknown_mode(self):
        rng = np.random.default_rng(7)
        oi = random_ops(rng, 2, 2)
        with pytest.raises(ConfigurationError):
            solve_dae_block4x4(oi, oi, 2.0, 1.0, 1.0, 0.1, np.ones(8), mode="foo")


class TestIntegration:
    def test_constant_problem(self):
        # N = 0 and G = w - 1: everything stays put
        z = SparseMatrix(np.zeros((1, 1)))
        one = SparseMatrix(np.eye(1))
        sys = DaeSystem(
            dim_u=1, dim_w=1,
            rhs=lambda u, w, t: np.zeros(1),
            constraint=lambda u, w, t: w - 1.0,
            blocks=lambda u, w, t: (z, z, z, one),
        )
        res = dae_integrate(sys, np.array([2.0]), np.array([1.0]), 0.0, 0.5, 0.1,
                            make_tableau("radau_iia", 2), TIGHT)
        assert np.allclose(res.u_final, 2.0, atol=1e-12)
        assert np.allclose(res.w_final, 1.0, atol=1e-12)

    def test_manufactured_third_order(self):
        problem = make_problem("dae_manufactured")
        res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 1.0, 0.1,
                            make_tableau("radau_iia", 2), TIGHT)
        ue, we = problem.exact(1.0)
        err = abs(res.u_final[0] - ue[0])
        assert err < 5e-6  # third-order at dt = 0.1
        assert abs(res.w_final[0] - we[0]) < 1e-9

    def test_error_doubles_by_order(self):
        problem = make_problem("dae_manufactured")
        errs = []
        for dt in (0.2, 0.1):
            res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 1.0, dt,
                                make_tableau("radau_iia", 2), TIGHT)
            ue, _ = problem.exact(1.0)
            errs.append(abs(res.u_final[0] - ue[0]))
        assert np.log2(errs[0] / errs[1]) >= 2.6

    def test_constraint_residual_tracked(self):
        problem = make_problem("dae_manufactured")
        res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.5, 0.1,
                            make_tableau("radau_iia", 2), TIGHT)
        for st in res.step_stats:
            assert st.constraint_residual <= 10 * TIGHT.newton_rtol

    def test_inconsistent_initialization_rejected(self):
        problem = make_problem("dae_manufactured")
        with pytest.raises(ConfigurationError):
            dae_integrate(problem.system, problem.u0, np.array([3.0]), 0.0, 0.5, 0.1,
                          make_tableau("radau_iia", 2), TIGHT)

    def test_dirk_rejected(self):
        problem = make_problem("dae_manufactured")
        with pytest.raises(ConfigurationError):
            dae_step(problem.system, problem.u0, problem.w0, 0.0, 0.1,
                     make_tableau("sdirk2"), TIGHT)

    def test_reduction_to_ode(self):
        # dim_w = 0 reproduces the pure ODE integrator
        hp = make_problem("heat1d", n=20)
        empty_uw = SparseMatrix(sp.csr_matrix((20, 0)))
        empty_wu = SparseMatrix(sp.csr_matrix((0, 20)))
        empty_ww = SparseMatrix(sp.csr_matrix((0, 0)))
        dsys = DaeSystem(
            dim_u=20, dim_w=0,
            rhs=lambda u, w, t: hp.system.rhs(u, t),
            constraint=lambda u, w, t: np.zeros(0),
            blocks=lambda u, w, t: (hp.system.linearize(u, t), empty_uw, empty_wu, empty_ww),
        )
        cfg = SolverConfig(newton_rtol=1e-12, krylov_rtol=1e-12)
        tab = make_tableau("gauss", 3)
        a = integrate(hp.system, hp.u0, 0.0, 0.05, 0.01, tab, cfg)
        b = dae_integrate(dsys, hp.u0, np.zeros(0), 0.0, 0.05, 0.01, tab, cfg)
        assert np.max(np.abs(a.u_final - b.u_final)) <= 1e-12

    @pytest.mark.parametrize("variant", [1, 2, 3])
    def test_variants_agree_after_convergence(self, variant):
        problem = make_problem("dae_manufactured")
        cfg = SolverConfig(variant=variant, newton_rtol=1e-12, krylov_rtol=1e-12)
        res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.3, 0.1,
                            make_tableau("radau_iia", 2), cfg)
        ref = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.3, 0.1,
                            make_tableau("radau_iia", 2), TIGHT)
        assert res.u_final[0] == pytest.approx(ref.u_final[0], abs=1e-10)


class TestShearLayer:
    def test_modes_agree_and_satisfy_constraint(self):
        problem = make_problem("shear_layer_small", n=16)
        tableau = make_tableau("radau_iia", 2)
        cfg = SolverConfig(newton_rtol=1e-10, krylov_rtol=1e-11, newton_maxit=40)
        u1, w1, st1 = dae_step(problem.system, problem.u0, problem.w0, 0.0, 0.02,
                               tableau, cfg, mode="coupled")
        u2, w2, st2 = dae_step(problem.system, problem.u0, problem.w0, 0.0, 0.02,
                               tableau, cfg, mode="reordered")
        assert np.max(np.abs(u1 - u2)) <= 1e-8
        assert st1.constraint_residual <= 1e-9
        assert st2.constraint_residual <= 1e-9

    def test_short_integration_runs(self):
        problem = make_problem("shear_layer_small", n=12)
        tableau = make_tableau("gauss", 2)
        cfg = SolverConfig(newton_rtol=1e-9, krylov_rtol=1e-10, newton_maxit=40)
        res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.04, 0.02,
                            tableau, cfg)
        assert len(res.u_states) == 3
        assert np.all(np.isfinite(res.u_final))


def test_gauss_constraint_drift_recorded_not_asserted(capsys):
    # non-stiffly-accurate schemes may drift off the constraint manifold;
    # the drift is reported through the stats stream, not asserted
    problem = make_problem("dae_manufactured")
    res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.5, 0.1,
                        make_tableau("gauss", 2), TIGHT)
    drift = max(st.constraint_residual for st in res.step_stats)
    print(f"gauss(2) constraint drift over 5 steps: {drift:.3e}")
    assert np.isfinite(drift)


def test_dae_step_stats_csv_includes_solver_split(tmp_path):
    from irkit.nonlinear import write_step_stats_csv

    problem = make_problem("dae_manufactured")
    res = dae_integrate(problem.system, problem.u0, problem.w0, 0.0, 0.2, 0.1,
                        make_tableau("radau_iia", 2), TIGHT)
    assert all(st.constraint_solves > 0 for st in res.step_stats)
    path = tmp_path / "daesteps.csv"
    write_step_stats_csv(res, path)
    header = path.read_text().splitlines()[0]
    assert "differential_solves" in header and "constraint_solves" in header
