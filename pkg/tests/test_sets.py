import numpy as np
import pytest
from hypothesis import given, strategies as st

from imitmpc.errors import DegenerateLevel, InvalidInput
from imitmpc.numerics import StabilityEnvelope, stability_envelope
from imitmpc.sets import (Ball, EllipsoidLevelSet, Polytope, Zonotope, contains, disturbance_invariant_zonotope,
                          invariance_holds, lqr_levelset, max_positive_invariant,
                          min_disturbance_invariant_bound, pontryagin_diff)


def box(r, d):
    return Polytope.symmetric_box(r, d)


def test_pontryagin_box_minus_ball():
    out = pontryagin_diff(box(10, 3), Ball(1.0, 3))
    assert out.is_box and not out.empty
    np.testing.assert_allclose(out.upper, 9.0)
    np.testing.assert_allclose(out.lower, -9.0)


def test_pontryagin_empty():
    assert pontryagin_diff(box(1, 2), Ball(2.0, 2)).empty


def test_pontryagin_box_minus_box_sampling_oracle(rng):
    X = box(10, 2)
    Y = Polytope.box([-1, -3], [2, 1])
    out = pontryagin_diff(X, Y)
    np.testing.assert_allclose(out.lower, [-9, -7])
    np.testing.assert_allclose(out.upper, [8, 9])
    # x + Y in X  iff  x + (each vertex of Y) in X
    verts = np.array([[a, b] for a in (-1, 2) for b in (-3, 1)])
    pts = rng.uniform(-12, 12, size=(10_000, 2))
    truth = np.all(np.abs(pts[:, None, :] + verts[None]) <= 10, axis=(1, 2))
    got = np.array([contains(out, p) for p in pts])
    assert np.array_equal(truth, got)


def test_pontryagin_general_polytope_uses_lp():
    # triangle as a general polytope: support in direction g from an LP
    T = Polytope(np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]]), np.array([0.0, 0.0, 1.0]))
    out = pontryagin_diff(box(5, 2), T)
    # supports of the triangle conv{0, e1, e2} along +-e_i
    np.testing.assert_allclose(out.h, [4, 4, 5, 5], atol=1e-6)


def test_pontryagin_multiple_sets_take_max_support():
    out = pontryagin_diff(box(10, 2), [Ball(1.0, 2), Polytope.box([-2, 0], [0.5, 0.5])])
    np.testing.assert_allclose(out.upper, [9, 9])
    np.testing.assert_allclose(out.lower, [-8, -9])


def test_pontryagin_dimension_mismatch():
    with pytest.raises(InvalidInput):
        pontryagin_diff(box(1, 2), Ball(0.1, 3))


@given(st.integers(0, 1000), st.floats(0.1, 4.0))
def test_pontryagin_soundness(seed, r):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((8, 3))
    X = Polytope(G, 5.0 + rng.random(8))
    out = pontryagin_diff(X, Ball(r, 3))
    if out.empty:
        return
    # rejection-sample points of X - B(r) from its bounding region
    cand = rng.uniform(-10, 10, size=(20_000, 3))
    xs = cand[np.all(cand @ out.G.T <= out.h, axis=1)][:1000]
    s = rng.standard_normal((1000, 3))
    s *= (r * rng.random((1000, 1)) ** (1 / 3)) / np.linalg.norm(s, axis=1, keepdims=True)
    for x in xs:
        assert np.all((x + s) @ X.G.T <= X.h + 1e-9)


def test_min_disturbance_bound_examples():
    assert min_disturbance_invariant_bound(StabilityEnvelope(1.0, 0.5, 2.0), 0.1, 2).radius == pytest.approx(0.2)
    assert min_disturbance_invariant_bound(StabilityEnvelope(2.0, 0.75, 8.0), 0.05, 2).radius == pytest.approx(0.4)
    with pytest.raises(InvalidInput):
        min_disturbance_invariant_bound(StabilityEnvelope(1.0, 0.5, 2.0), 0.0, 2)


def test_truncated_tube_sum_inside_ball(spec3, rng):
    A_K = spec3.lqr.A_K
    eps = 0.01
    Z = min_disturbance_invariant_bound(stability_envelope(A_K), eps, 3)
    powers = [np.linalg.matrix_power(A_K, k) for k in range(51)]
    worst = 0.0
    for _ in range(2000):
        w = rng.standard_normal((51, 3))
        w *= eps / np.linalg.norm(w, axis=1, keepdims=True)
        worst = max(worst, np.linalg.norm(sum(P @ wk for P, wk in zip(powers, w))))
    # aligned worst case: every term pushes along the top singular direction of its power
    aligned = sum(np.linalg.norm(P, 2) for P in powers) * eps
    assert worst <= Z.radius
    assert aligned <= Z.radius


def test_zonotope_is_disturbance_invariant(spec3, rng):
    A_K = spec3.lqr.A_K
    eps = 0.1
    Z = disturbance_invariant_zonotope(A_K, eps)
    # A_K Z + B(eps) in Z  <=>  h_Z(A_K' d) + eps ||d|| <= h_Z(d) for every direction d
    for d in rng.standard_normal((2000, 3)):
        assert Z.support(A_K.T @ d) + eps * np.linalg.norm(d) <= Z.support(d) + 1e-12
    # and it is much tighter than the envelope ball
    radius = max(Z.support(d / np.linalg.norm(d)) for d in rng.standard_normal((2000, 3)))
    assert radius < stability_envelope(A_K).kappa * eps


def test_zonotope_membership(rng):
    Z = Zonotope(np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 2.0]]))
    for lam in rng.uniform(-1, 1, size=(20, 3)):
        assert Z.gauge(Z.generators @ lam) <= 1 + 1e-6
    assert not contains(Z, [2.5, 0.0])
    assert contains(Z, [2.0, 1.0])
    assert Z.support([1.0, 0.0]) == pytest.approx(2.0)
    assert Z.linear_image(np.array([[1.0, 0.0]])).support([1.0]) == pytest.approx(2.0)


def test_max_invariant_zero_dynamics():
    X = box(1, 2)
    rep = max_positive_invariant(np.zeros((2, 2)), X, box(1, 1), np.array([[1.0, 0.0]]))
    assert rep.converged and rep.iterations == 1
    for p in np.random.default_rng(0).uniform(-1, 1, size=(200, 2)):
        assert contains(rep.O_inf, p)
    assert not contains(rep.O_inf, [1.01, 0.0])


def test_max_invariant_contraction_keeps_box():
    X = box(1, 2)
    rep = max_positive_invariant(0.5 * np.eye(2), X, box(1, 1), np.zeros((1, 2)))
    assert rep.converged
    for p in np.random.default_rng(1).uniform(-1, 1, size=(200, 2)):
        assert contains(rep.O_inf, p)


def _boundary_points(O: Polytope, rng, n):
    """Points on the boundary of a bounded polytope: ray shooting from the origin."""
    out = []
    for d in rng.standard_normal((n, O.dim)):
        Gd = O.G @ d
        t = np.min(O.h[Gd > 0] / Gd[Gd > 0])
        out.append(t * d)
    return np.array(out)


def test_max_invariant_benchmark_rollout_oracle(spec3, bench3, rng):
    sys, X, U, _ = bench3
    lqr = spec3.lqr
    rep = max_positive_invariant(lqr.A_K, X, U, lqr.K)
    assert rep.converged
    O = rep.O_inf
    for x in _boundary_points(O, rng, 100):
        for _ in range(50):
            assert contains(X, x, 1e-7) and contains(U, lqr.K @ x, 1e-7)
            x = lqr.A_K @ x
            assert contains(O, x, 1e-7)
    # one more iteration changes nothing
    assert invariance_holds(O, lqr.A_K)


def test_lqr_levelset_examples():
    L = lqr_levelset(np.eye(3), np.zeros((1, 3)), box(1, 3), box(1, 1))
    assert L.c == pytest.approx(1.0)
    L = lqr_levelset(np.diag([4.0, 1.0]), np.zeros((1, 2)), Polytope([[1.0, 0.0]], [2.0]), box(1, 1))
    assert L.c == pytest.approx(16.0)
    # max of g.x over the ellipsoid is sqrt(c g'P^-1 g) = 2, exactly the bound
    assert np.sqrt(L.c * 0.25) == pytest.approx(2.0)
    with pytest.raises(DegenerateLevel):
        lqr_levelset(np.eye(2), np.zeros((1, 2)), Polytope([[1.0, 0.0]], [0.0]), box(1, 1))


def test_lqr_levelset_benchmark5_boundary_oracle(bench5, rng):
    from imitmpc.numerics import QuadCost, solve_dare
    sys, X, U, _ = bench5
    lqr = solve_dare(sys, QuadCost(np.eye(5), np.eye(1), np.eye(5)))
    L = lqr_levelset(lqr.P, lqr.K, X, U)
    assert L.c > 0
    Lc = np.linalg.cholesky(np.linalg.inv(lqr.P))
    d = rng.standard_normal((10_000, 5))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = np.sqrt(L.c) * d @ Lc.T                      # x'Px = c exactly
    np.testing.assert_allclose(np.einsum("ij,jk,ik->i", pts, lqr.P, pts), L.c, rtol=1e-9)
    assert np.all(np.abs(pts) <= 100 + 1e-9)
    assert np.all(np.abs(pts @ lqr.K.T) <= 10 + 1e-9)


def test_levelset_invariance_sampled(spec3, bench3, rng):
    sys, X, U, _ = bench3
    lqr = spec3.lqr
    L = lqr_levelset(lqr.P, lqr.K, X, U)
    for d in rng.standard_normal((2000, 3)):
        x = d / np.sqrt(d @ lqr.P @ d) * np.sqrt(L.c) * rng.random() ** (1 / 3)
        xn = lqr.A_K @ x
        assert xn @ lqr.P @ xn <= L.c + 1e-9


def test_contains_examples():
    assert contains(box(1, 2), [0, 0])
    assert not contains(Ball(1.0, 2), [0, 1 + 1e-6])
    assert contains(EllipsoidLevelSet(np.eye(2), 1.0), [0.6, 0.8])
    with pytest.raises(InvalidInput):
        contains(box(1, 2), [0, 0, 0])


def test_polytope_validation():
    with pytest.raises(InvalidInput):
        Polytope(np.array([[0.0, 0.0]]), [1.0])
    with pytest.raises(InvalidInput):
        EllipsoidLevelSet(np.diag([1.0, -1.0]), 1.0)
    with pytest.raises(InvalidInput):
        Ball(-1.0, 2)
