import numpy as np
import pytest

from imitmpc.errors import EmptyTightenedSet, InfeasibleState, InvalidInput
from imitmpc.mpc import (MpcController, TerminalMode, build_qp, is_feasible, make_mpc_spec, mpc_control,
                         radial_retract, tightened_spec)
from imitmpc.numerics import LinearSystem
from imitmpc.qp import check_kkt, solve_qp
from imitmpc.sets import Ball, Polytope, contains, lqr_levelset


def test_one_step_riccati_terminal_is_lqr():
    sys = LinearSystem(np.array([[1.2, 0.3], [0.0, 0.9]]), np.array([[0.0], [1.0]]))
    big = Polytope.symmetric_box(1e6, 2)
    spec = make_mpc_spec(sys, np.eye(2), np.eye(1), 1, big, Polytope.symmetric_box(1e6, 1))
    x = np.array([1.5, -2.0])
    np.testing.assert_allclose(mpc_control(spec, x), spec.K @ x, atol=1e-6)


def test_qp_dimensions(spec3):
    p = build_qp(spec3, [9.0, 9.0, 9.0])
    assert p.n == 3 * 20 + 1 * 20
    assert p.A_eq.shape[0] == 60


def test_double_integrator_grid_search():
    sys = LinearSystem(np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[0.0], [1.0]]))
    X = Polytope.symmetric_box(1e3, 2)
    U = Polytope.symmetric_box(1.0, 1)
    spec = make_mpc_spec(sys, np.eye(2), np.eye(1), 2, X, U)
    x0 = np.array([0.0, 2.0])
    u = mpc_control(spec, x0)[0]
    P = spec.cost.P_f
    grid = np.linspace(-1, 1, 2001)
    u0, u1 = np.meshgrid(grid, grid, indexing="ij")
    # explicit two-step cost over the grid
    x1a = x0[0] + x0[1]
    x1b = x0[1] + u0
    x2a = x1a + x1b
    x2b = x1b + u1
    J = (x0 @ x0 + u0**2 + x1a**2 + x1b**2 + u1**2
         + P[0, 0] * x2a**2 + 2 * P[0, 1] * x2a * x2b + P[1, 1] * x2b**2)
    i, _ = np.unravel_index(np.argmin(J), J.shape)
    assert u == pytest.approx(grid[i], abs=1.5e-3)
    assert MpcController(spec).value(x0) <= J.min() + 1e-9


def test_solution_passes_kkt(spec3):
    p = build_qp(spec3, [9.0, 9.0, 9.0])
    sol = solve_qp(p)
    assert sol.ok and check_kkt(p, sol, 1e-5).passed


def test_lqr_agreement_inside_levelset(spec3_set, bench3, rng):
    sys, X, U, _ = bench3
    L = lqr_levelset(spec3_set.lqr.P, spec3_set.K, X, U)
    ctrl = MpcController(spec3_set)
    for d in rng.standard_normal((30, 3)):
        x = d * np.sqrt(L.c / (d @ L.P @ d)) * rng.random()
        assert np.linalg.norm(ctrl(x) - spec3_set.K @ x) <= 1e-5


def test_origin_and_far_state(spec3):
    np.testing.assert_allclose(mpc_control(spec3, np.zeros(3)), 0.0, atol=1e-9)
    with pytest.raises(InfeasibleState):
        mpc_control(spec3, [1e6, 0.0, 0.0])


def test_is_feasible_examples(spec3_set):
    assert is_feasible(spec3_set, np.zeros(3))
    assert not is_feasible(spec3_set, [150.0, 0.0, 0.0])
    assert is_feasible(spec3_set, [9.0, 9.0, 9.0])


def test_closed_loop_value_decrease_and_feasibility(spec3_set, rng):
    ctrl = MpcController(spec3_set)
    sys, cost = spec3_set.sys, spec3_set.cost
    for x in [np.array([9.0, 9.0, 9.0]), rng.uniform(8, 10, 3)]:
        V = ctrl.solve(x)
        for _ in range(50):
            nxt = sys.step(x, V.u_seq[0])
            Vn = ctrl.solve(nxt)
            assert Vn.objective <= V.objective - cost.stage(x, V.u_seq[0]) + 1e-6 * max(1.0, V.objective)
            x, V = nxt, Vn


def test_predicted_states_consistent(spec3):
    sol = MpcController(spec3).solve([9.0, 9.0, 9.0])
    x = sol.x_seq[0]
    for k, u in enumerate(sol.u_seq):
        x = spec3.sys.step(x, u)
        np.testing.assert_allclose(x, sol.x_seq[k + 1], atol=1e-8)
        assert contains(spec3.U, u, 1e-6)


def test_tightened_spec_examples(spec3):
    out = tightened_spec(spec3, Ball(0.5, 3))
    np.testing.assert_allclose(out.X.upper, 99.5)
    out = tightened_spec(spec3, Ball(0.5, 3), K=np.array([[4.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.U.upper, 8.0)
    np.testing.assert_allclose(out.U.lower, -8.0)
    with pytest.raises(EmptyTightenedSet):
        tightened_spec(spec3, Ball(101.0, 3))


def test_tightened_terminal_set_rebuilt(spec3_set):
    out = tightened_spec(spec3_set, Ball(0.5, 3))
    assert out.X_f is not None
    # rebuilt on the tighter sets, so no larger than the original
    for d in np.eye(3):
        assert out.X_f.support(d) <= spec3_set.X_f.support(d) + 1e-9


def test_levelset_terminal_set(bench3):
    sys, X, U, _ = bench3
    spec = make_mpc_spec(sys, np.eye(3), np.eye(1), 20, X, U, TerminalMode.LQR_COST_AND_SET, "levelset")
    sol = MpcController(spec).solve([9.0, 9.0, 9.0])
    xN = sol.x_seq[-1]
    assert xN @ spec.X_f.P @ xN <= spec.X_f.c * (1 + 1e-6)


def test_spec_requires_riccati_terminal(spec3):
    from dataclasses import replace
    from imitmpc.numerics import QuadCost
    with pytest.raises(InvalidInput):
        replace(spec3, cost=QuadCost(np.eye(3), np.eye(1), 2 * np.eye(3)))


def test_domain_projection(spec3_set):
    ctrl = MpcController(spec3_set)
    x = np.array([100.0, 40.0, -30.0])
    assert not ctrl.is_feasible(x)
    xp = ctrl.project_to_domain(x)
    assert ctrl.is_feasible(xp)
    xs = radial_retract(ctrl.is_feasible, x)
    assert ctrl.is_feasible(xs)
    # the nearest feasible point is no farther than the radial one
    assert np.linalg.norm(xp - x) <= np.linalg.norm(xs - x) + 1e-6 + 1e-2 * np.linalg.norm(x)
