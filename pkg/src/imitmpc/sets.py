"""Constraint sets and invariance computations.

Polytopes are kept in halfspace form ``{x : G x <= h}``. Balls are centred
at the origin, as are ellipsoidal level sets ``{x : x'Px <= c}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLevel, InvalidInput, UnstableMatrix
from .numerics import StabilityEnvelope, spectral_radius
from .qp import QpSolver, QpStatus

SLACK = 1e-9


@dataclass(frozen=True)
class Polytope:
    G: np.ndarray
    h: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    empty: bool = False

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if G.shape[0] != h.shape[0]:
            raise InvalidInput("G and h have different row counts")
        if G.shape[0] and np.any(np.all(G == 0.0, axis=1)):
            raise InvalidInput("polytope has an all-zero row")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        if self.lower is not None:
            object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float).reshape(-1))
            object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float).reshape(-1))

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape:
            raise InvalidInput("box bounds differ in shape")
        n = lower.size
        I = np.eye(n)
        empty = bool(np.any(lower > upper))
        return cls(np.vstack([I, -I]), np.concatenate([upper, -lower]), lower, upper, empty)

    @classmethod
    def symmetric_box(cls, radius, dim) -> "Polytope":
        r = np.broadcast_to(np.asarray(radius, dtype=float), (dim,))
        return cls.box(-r, r)

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def is_box(self) -> bool:
        return self.lower is not None

    def contains(self, x, slack=SLACK) -> bool:
        return contains(self, x, slack)

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise InvalidInput("dimension mismatch")
        return Polytope(np.vstack([self.G, other.G]), np.concatenate([self.h, other.h]),
                        empty=self.empty or other.empty)

    def preimage(self, M) -> "Polytope":
        """``{x : M x in self}``; rows that vanish are dropped."""
        G = self.G @ np.asarray(M, dtype=float)
        keep = ~np.all(np.abs(G) < 1e-14, axis=1)
        if np.any(self.h[~keep] < 0):
            return Polytope(np.eye(G.shape[1])[:1], [-1.0], empty=True)
        return Polytope(G[keep], self.h[keep], empty=self.empty)

    def project(self, x):
        """Euclidean projection; closed form for boxes only."""
        if not self.is_box:
            raise InvalidInput("projection is only implemented for boxes")
        return np.clip(x, self.lower, self.upper)

    def support(self, direction) -> float:
        """``max_{s in self} direction . s``."""
        d = np.asarray(direction, dtype=float)
        if self.is_box:
            return float(np.sum(np.maximum(d * self.lower, d * self.upper)))
        val, _ = _lp_max(d, self.G, self.h)
        return val


@dataclass(frozen=True)
class Ball:
    radius: float
    dim: int

    def __post_init__(self):
        if self.radius < 0:
            raise InvalidInput("ball radius must be nonnegative")
        if self.dim < 1:
            raise InvalidInput("ball dimension must be positive")

    def support(self, direction) -> float:
        return float(self.radius * np.linalg.norm(direction))


@dataclass(frozen=True)
class EllipsoidLevelSet:
    P: np.ndarray
    c: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if not np.allclose(P, P.T, atol=1e-10) or np.linalg.eigvalsh((P + P.T) / 2).min() <= 0:
            raise InvalidInput("level-set matrix must be symmetric positive definite")
        if not self.c > 0:
            raise InvalidInput("level must be positive")
        object.__setattr__(self, "P", (P + P.T) / 2)

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x)

    def bounding_box(self) -> Polytope:
        half = np.sqrt(self.c * np.diag(np.linalg.inv(self.P)))
        return Polytope.box(-half, half)


@dataclass(frozen=True)
class Zonotope:
    """Centred zonotope ``{G lam : ||lam||_inf <= 1}`` with generator matrix ``G``."""
    generators: np.ndarray

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.generators, dtype=float))
        if not np.all(np.isfinite(G)):
            raise InvalidInput("generators must be finite")
        object.__setattr__(self, "generators", G)

    @property
    def dim(self) -> int:
        return self.generators.shape[0]

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    def support(self, direction) -> float:
        return float(np.abs(np.asarray(direction, dtype=float) @ self.generators).sum())

    def linear_image(self, M) -> "Zonotope":
        return Zonotope(np.atleast_2d(np.asarray(M, dtype=float)) @ self.generators)

    def gauge(self, x) -> float:
        """Smallest ``t`` with ``x in t * self`` (LP over the generator weights)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        d, m = self.generators.shape
        n = m + 1
        A_eq = np.hstack([self.generators, np.zeros((d, 1))])
        I = np.eye(m)
        t_col = -np.ones((m, 1))
        A_in = np.vstack([np.hstack([I, t_col]), np.hstack([-I, t_col])])
        g = np.zeros(n)
        g[-1] = 1.0
        sol = QpSolver(np.zeros((n, n)), A_eq, A_in, max_iters=50_000).solve(g, x, np.zeros(2 * m))
        if sol.status is QpStatus.INFEASIBLE:
            return np.inf
        return float(max(sol.z[-1], 0.0))


def contains(S, x, slack: float = SLACK) -> bool:
    """Membership with additive slack on every inequality."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != S.dim:
        raise InvalidInput(f"point has dimension {x.size}, set has {S.dim}")
    if isinstance(S, Polytope):
        if S.empty:
            return False
        return bool(np.all(S.G @ x <= S.h + slack))
    if isinstance(S, Ball):
        return bool(np.linalg.norm(x) <= S.radius + slack)
    if isinstance(S, EllipsoidLevelSet):
        return bool(x @ S.P @ x <= S.c + slack)
    if isinstance(S, Zonotope):
        return S.gauge(x) <= 1.0 + slack
    raise InvalidInput(f"unsupported set type {type(S).__name__}")


def _lp_max(c, G, h):
    """Maximize ``c'x`` over ``Gx <= h`` with the ADMM solver."""
    n = G.shape[1]
    solver = QpSolver(np.zeros((n, n)), np.zeros((0, n)), G, max_iters=50_000)
    sol = solver.solve(-np.asarray(c, dtype=float), b_in=h)
    if sol.status is QpStatus.INFEASIBLE:
        return -np.inf, sol
    return -sol.objective, sol


def pontryagin_diff(X: Polytope, S) -> Polytope:
    """``X - S = {x : x + S in X}`` by shrinking every row by its support.

    ``S`` may also be a sequence of sets; each row is then shrunk by the
    largest of their supports, i.e. the difference with their convex hull.
    """
    sets = list(S) if isinstance(S, (list, tuple)) else [S]
    if any(T.dim != X.dim for T in sets):
        raise InvalidInput("dimension mismatch in Pontryagin difference")
    shrink = np.array([max(T.support(g) for T in sets) for g in X.G]).reshape(-1)
    h = X.h - shrink
    empty = X.empty or bool(np.any(h < 0))
    lower = upper = None
    if X.is_box and not empty:
        d = X.dim
        upper, lower = h[:d], -h[d:]
    return Polytope(X.G.copy(), h, lower, upper, empty)


def min_disturbance_invariant_bound(env: StabilityEnvelope, eps: float, dim: int) -> Ball:
    """Outer ball ``B(kappa * eps)`` of the minimal disturbance invariant set."""
    if eps <= 0:
        raise InvalidInput("disturbance bound must be positive")
    return Ball(env.kappa * eps, dim)


def disturbance_invariant_zonotope(A_K, eps: float, alpha: float = 0.05, max_terms: int = 10_000) -> Zonotope:
    """Zonotope ``Z`` with ``A_K Z + B(eps) in Z``, close to the minimal such set.

    With ``W`` the box ``[-eps, eps]^d`` (which contains the ball), ``s`` is
    the first power with ``A_K^s W in alpha W`` and
    ``Z = (1 - alpha)^-1 (W + A_K W + ... + A_K^(s-1) W)``.
    """
    A_K = np.asarray(A_K, dtype=float)
    if eps <= 0:
        raise InvalidInput("disturbance bound must be positive")
    if not 0 < alpha < 1:
        raise InvalidInput("alpha must lie in (0, 1)")
    if spectral_radius(A_K) >= 1.0:
        raise UnstableMatrix("closed loop is not Schur stable")
    d = A_K.shape[0]
    blocks, M = [], np.eye(d)
    while np.abs(M).sum(axis=1).max() > alpha:
        blocks.append(M)
        if len(blocks) >= max_terms:
            raise UnstableMatrix(f"A_K^s did not contract below {alpha} within {max_terms} powers")
        M = A_K @ M
    return Zonotope(eps / (1.0 - alpha) * np.hstack(blocks))


@dataclass
class InvariantSetReport:
    O_inf: Polytope
    iterations: int
    converged: bool
    lp_solves: int = field(default=0)


def _is_redundant(row, bound, O: Polytope, tol=1e-9):
    val, sol = _lp_max(row, O.G, O.h)
    if sol.status is QpStatus.MAX_ITERS:
        # be conservative: an unverified row is kept
        return False
    return val <= bound + tol * (1.0 + abs(bound))


def max_positive_invariant(A_K, X: Polytope, U: Polytope, K, max_iters: int = 500) -> InvariantSetReport:
    """Maximal positively invariant set of ``x+ = A_K x`` inside ``X`` with ``Kx in U``.

    Standard iteration: start from ``{x in X : Kx in U}`` and keep adding the
    preimage rows of the most recent layer that are not implied by the
    current set (checked with one LP per row).
    """
    A_K = np.asarray(A_K, dtype=float)
    if spectral_radius(A_K) >= 1.0:
        raise UnstableMatrix("closed loop is not Schur stable")
    O = X.intersect(U.preimage(K))
    layer_G, layer_h = O.G, O.h
    lps = 0
    for it in range(1, max_iters + 1):
        new_G = layer_G @ A_K
        added_G, added_h = [], []
        for g, b in zip(new_G, layer_h):
            if np.all(np.abs(g) < 1e-14):
                if b < 0:
                    return InvariantSetReport(Polytope(np.eye(O.dim)[:1], [-1.0], empty=True), it, True, lps)
                continue
            lps += 1
            if not _is_redundant(g, b, O):
                added_G.append(g)
                added_h.append(b)
        if not added_G:
            return InvariantSetReport(O, it, True, lps)
        layer_G, layer_h = np.array(added_G), np.array(added_h)
        O = Polytope(np.vstack([O.G, layer_G]), np.concatenate([O.h, layer_h]))
    return InvariantSetReport(O, max_iters, False, lps)


def invariance_holds(O: Polytope, A_K) -> bool:
    """True when one more invariance iteration adds no constraint."""
    for g, b in zip(O.G @ np.asarray(A_K, dtype=float), O.h):
        if np.all(np.abs(g) < 1e-14):
            if b < -SLACK:
                return False
            continue
        if not _is_redundant(g, b, O, tol=1e-7):
            return False
    return True


def lqr_levelset(P, K, X: Polytope, U: Polytope) -> EllipsoidLevelSet:
    """Largest ``c`` with ``{x'Px <= c}`` inside ``X`` and mapped by ``K`` into ``U``."""
    P = np.asarray(P, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    Pinv = np.linalg.inv(P)
    levels = []
    for g, h in zip(X.G, X.h):
        q = g @ Pinv @ g
        if q > 0:
            levels.append(max(h, 0.0) ** 2 / q)
    for g, h in zip(U.G, U.h):
        v = K.T @ g
        q = v @ Pinv @ v
        if q > 1e-300:
            levels.append(max(h, 0.0) ** 2 / q)
    if not levels:
        raise DegenerateLevel("no constraint bounds the level set")
    c = min(levels)
    if not c > 0:
        raise DegenerateLevel(f"level {c} is not positive")
    return EllipsoidLevelSet(P, float(c))
