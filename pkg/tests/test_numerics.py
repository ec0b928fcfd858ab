import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from imitmpc.errors import InvalidInput, UnstableMatrix
from imitmpc.harness.systems import paper_matrix
from imitmpc.numerics import (LinearSystem, QuadCost, lu_solve, riccati_residual, solve_dare,
                              spectral_radius, stability_envelope)


def lqr(A, B, Q=None, R=None):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    Q = np.eye(A.shape[0]) if Q is None else np.atleast_2d(Q)
    R = np.eye(B.shape[1]) if R is None else np.atleast_2d(R)
    return solve_dare(LinearSystem(A, B), QuadCost(Q, R, Q))


def test_dare_zero_dynamics():
    sol = lqr(np.zeros((2, 2)), np.eye(2))
    np.testing.assert_allclose(sol.P, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(sol.K, np.zeros((2, 2)), atol=1e-12)


def test_dare_scalar_no_input():
    sol = lqr([[0.5]], [[0.0]])
    assert sol.P[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-8)
    assert sol.K[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_dare_scalar_quadratic_formula():
    # p = q + a^2 p r / (r + p)  <=>  p^2 + (r - q - a^2 r) p - q r = 0
    a, b, q, r = 1.1, 1.0, 1.0, 1.0
    lin = r - q - a * a * r
    p = (-lin + np.sqrt(lin * lin + 4 * q * r)) / 2
    k = -b * p * a / (r + b * b * p)
    sol = lqr([[a]], [[b]], [[q]], [[r]])
    assert sol.P[0, 0] == pytest.approx(p, rel=1e-9)
    assert sol.K[0, 0] == pytest.approx(k, rel=1e-9)


def test_dare_matches_scipy_on_benchmark():
    import scipy.linalg as sla
    A = paper_matrix(5)
    B = np.zeros((5, 1))
    B[-1] = 1.0
    sol = lqr(A, B)
    P_ref = sla.solve_discrete_are(A, B, np.eye(5), np.eye(1))
    np.testing.assert_allclose(sol.P, P_ref, rtol=1e-7)
    assert sol.riccati_residual <= 1e-8
    assert spectral_radius(sol.A_K) < 1


def test_dare_deterministic():
    A = paper_matrix(3)
    B = np.array([[0.0], [0.0], [1.0]])
    s1, s2 = lqr(A, B), lqr(A, B)
    assert np.array_equal(s1.P, s2.P) and np.array_equal(s1.K, s2.K)


def test_unstabilizable_pair_rejected():
    with pytest.raises(InvalidInput):
        LinearSystem(np.diag([2.0, 0.5]), np.array([[0.0], [1.0]]))


def test_cost_validation():
    with pytest.raises(InvalidInput):
        QuadCost(np.eye(2), np.zeros((1, 1)), np.eye(2))
    with pytest.raises(InvalidInput):
        QuadCost(-np.eye(2), np.eye(1), np.eye(2))
    with pytest.raises(InvalidInput):
        QuadCost(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(1), np.eye(2))


def test_spectral_radius_examples():
    assert spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9, rel=1e-12)
    assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == 0.0
    assert spectral_radius(paper_matrix(3)) == pytest.approx(1.1, rel=1e-8)
    with pytest.raises(InvalidInput):
        spectral_radius([[np.nan, 0.0], [0.0, 1.0]])
    with pytest.raises(InvalidInput):
        spectral_radius(np.ones((2, 3)))


@given(st.integers(0, 10_000))
def test_spectral_radius_symmetric_equals_two_norm(seed):
    # for symmetric matrices the spectral radius is the largest singular value
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((5, 5))
    M = M + M.T
    assert spectral_radius(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-8)


@given(st.integers(0, 10_000))
def test_spectral_radius_gelfand_bracket(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((4, 4))
    sr = spectral_radius(M)
    assert sr <= np.linalg.norm(np.linalg.matrix_power(M, 60), 2) ** (1 / 60) * (1 + 1e-9)
    assert sr == pytest.approx(np.abs(np.roots(np.poly(M))).max(), rel=1e-6)


def test_envelope_examples():
    env = stability_envelope(0.5 * np.eye(3))
    assert (env.rho, env.tau, env.kappa) == pytest.approx((0.75, 1.0, 4.0))
    env = stability_envelope(np.diag([0.9, 0.1]))
    assert env.rho == pytest.approx(0.95)
    assert env.tau == pytest.approx(1.0)
    with pytest.raises(UnstableMatrix):
        stability_envelope(np.diag([1.0, 0.2]))


def test_envelope_nonnormal_bound_by_direct_powers():
    A = np.array([[0.5, 10.0], [0.0, 0.5]])
    env = stability_envelope(A)
    assert env.tau > 1
    Mk = np.eye(2)
    for k in range(201):
        assert np.linalg.norm(Mk, 2) <= env.tau * env.rho**k + 1e-9
        Mk = Mk @ A


@given(st.integers(0, 10_000))
def test_envelope_bound_random_stable(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((3, 3))
    M *= 0.95 * rng.random() / spectral_radius(M)
    env = stability_envelope(M)
    assert 0 < env.rho < 1 and env.tau >= 1
    assert env.kappa == pytest.approx(env.tau / (1 - env.rho))
    Mk = np.eye(3)
    for k in range(env.k_check + 1):
        assert np.linalg.norm(Mk, 2) <= env.tau * env.rho**k + 1e-9
        Mk = Mk @ M


def test_lu_solve_refined():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((6, 6)) + 6 * np.eye(6)
    b = rng.standard_normal(6)
    np.testing.assert_allclose(M @ lu_solve(M, b), b, atol=1e-12)


def test_riccati_residual_zero_at_scipy_solution():
    import scipy.linalg as sla
    A = paper_matrix(3)
    B = np.array([[0.0], [0.0], [1.0]])
    P = sla.solve_discrete_are(A, B, np.eye(3), np.eye(1))
    assert riccati_residual(A, B, np.eye(3), np.eye(1), P) < 1e-8


def test_ill_scaled_dare_converges():
    # benchmark-style triangular system with ||P|| near 1e6, where double-precision
    # rounding alone exceeds an absolute 1e-8 residual
    from imitmpc.harness.systems import random_matrix
    A = random_matrix(6, 9)
    B = np.eye(6)[:, -1:]
    lqr = solve_dare(LinearSystem(A, B), QuadCost(np.eye(6), np.eye(1), np.eye(6)))
    P_ref = scipy.linalg.solve_discrete_are(A, B, np.eye(6), np.eye(1))
    assert np.linalg.norm(lqr.P) > 1e6
    assert lqr.riccati_residual <= 1e-14 * np.linalg.norm(lqr.P)
    np.testing.assert_allclose(lqr.P, P_ref, rtol=1e-6)
