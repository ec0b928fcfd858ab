"""Dense linear algebra kernels, DARE/LQR synthesis and stability envelopes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InvalidInput, NonConvergence, SingularMatrix, UnstableMatrix

DARE_TOL = 1e-8
K_CHECK = 200


def _as_matrix(M, name):
    M = np.array(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise InvalidInput(f"{name} must be a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} has non-finite entries")
    return M


def lu_solve(M, rhs, refine=1):
    """Solve ``M X = rhs`` by partial-pivoted LU with residual refinement."""
    M = np.asarray(M, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    lu, piv = sla.lu_factor(M, check_finite=False)
    if np.any(np.diag(lu) == 0.0):
        raise SingularMatrix("matrix is exactly singular")
    X = sla.lu_solve((lu, piv), rhs, check_finite=False)
    for _ in range(refine):
        X = X + sla.lu_solve((lu, piv), rhs - M @ X, check_finite=False)
    if not np.all(np.isfinite(X)):
        raise SingularMatrix("linear solve produced non-finite values")
    return X


def spectral_radius(M) -> float:
    """Largest eigenvalue modulus of a square matrix (Schur-based)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInput(f"spectral radius needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput("matrix has NaN/Inf entries")
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass(frozen=True)
class QuadCost:
    """Stage weights ``Q``, ``R`` and terminal weight ``P_f``."""

    Q: np.ndarray
    R: np.ndarray
    P_f: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        P_f = _as_matrix(self.P_f, "P_f")
        for name, M in (("Q", Q), ("R", R), ("P_f", P_f)):
            if M.shape[0] != M.shape[1]:
                raise InvalidInput(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12, rtol=1e-10):
                raise InvalidInput(f"{name} must be symmetric")
        if Q.shape != P_f.shape:
            raise InvalidInput("Q and P_f must have the same shape")
        if np.linalg.eigvalsh(Q).min() < -1e-10 or np.linalg.eigvalsh(P_f).min() < -1e-10:
            raise InvalidInput("Q and P_f must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 1e-10:
            raise InvalidInput("R must be positive definite")
        object.__setattr__(self, "Q", (Q + Q.T) / 2)
        object.__setattr__(self, "R", (R + R.T) / 2)
        object.__setattr__(self, "P_f", (P_f + P_f.T) / 2)

    def stage(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u)

    def with_terminal(self, P_f) -> "QuadCost":
        return QuadCost(self.Q, self.R, P_f)


@dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    A_K: np.ndarray
    riccati_residual: float
    iterations: int = 0


def _riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    G = R + BtP @ B
    gain = lu_solve(G, BtP @ A)
    Pn = A.T @ P @ A - (A.T @ P @ B) @ gain + Q
    return (Pn + Pn.T) / 2


def _riccati_map_ext(A, B, Q, R, P):
    """Riccati map in ``np.longdouble``; the small gain solve is refined to that precision."""
    BtP = B.T @ P
    G = R + BtP @ B
    rhs = BtP @ A
    G64 = G.astype(float)
    gain = np.linalg.solve(G64, rhs.astype(float)).astype(np.longdouble)
    for _ in range(3):
        gain = gain + np.linalg.solve(G64, (rhs - G @ gain).astype(float))
    Pn = A.T @ P @ A - (A.T @ P @ B) @ gain + Q
    return (Pn + Pn.T) / 2


def riccati_residual(A, B, Q, R, P) -> float:
    """``||P - Ric(P)||_F`` evaluated in extended precision.

    With ``||P||`` in the millions the double-precision evaluation alone
    carries rounding error above 1e-8, so the map is formed in ``longdouble``.
    """
    A, B, Q, R, P = (np.asarray(M, dtype=np.longdouble) for M in (A, B, Q, R, P))
    return float(np.sqrt(np.sum((P - _riccati_map_ext(A, B, Q, R, P)) ** 2)))


def _dare_iterate(A, B, Q, R, max_iters, tol):
    """Fixed-point iteration in double precision, finished in extended precision.

    Converged means the step has stopped shrinking at a level that is
    rounding noise relative to ``||P||``, or dropped below ``tol``.
    """
    P = np.array(Q, dtype=float)
    best = None
    stall = 0
    k = 0
    for k in range(1, max_iters + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            Pn = _riccati_map(A, B, Q, R, P)
        if not np.all(np.isfinite(Pn)):
            break
        # the step length is the Riccati residual of the previous iterate
        step = float(np.linalg.norm(Pn - P, "fro"))
        noise = 1e-12 * Pn.shape[0] * (1.0 + float(np.abs(Pn).max()))
        if step <= max(tol, noise) and (best is None or step < best[1]):
            best, stall = (P, step, k), 0
        elif best is not None:
            stall += 1
        P = Pn
        if step <= 0.01 * tol or stall >= 50:
            break
    if best is None:
        raise NonConvergence(f"DARE fixed-point iteration did not converge in {max_iters} iterations")
    P, step, k = best
    if step <= 0.01 * tol:
        return best
    # finish in extended precision; the map contracts, so a few dozen steps suffice
    ext = [np.asarray(M, dtype=np.longdouble) for M in (A, B, Q, R)]
    Pe = np.asarray(P, dtype=np.longdouble)
    for _ in range(200):
        Pn = _riccati_map_ext(*ext, Pe)
        done = float(np.sqrt(np.sum((Pn - Pe) ** 2))) <= 1e-3 * tol
        Pe = Pn
        if done:
            break
    P = Pe.astype(float)
    return P, riccati_residual(A, B, Q, R, P), k


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time system ``x+ = A x + B u``.

    Construction checks stabilizability by running the Riccati iteration
    with identity weights; pass ``check=False`` to skip it.
    """

    A: np.ndarray
    B: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise InvalidInput("A must be square")
        if B.shape[0] != A.shape[0]:
            raise InvalidInput("B must have as many rows as A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.check:
            try:
                _dare_iterate(A, B, np.eye(self.d_x), np.eye(self.d_u), 10_000, 1e-6)
            except (NonConvergence, SingularMatrix) as exc:
                raise InvalidInput("(A, B) is not stabilizable") from exc

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    def step(self, x, u, w=None):
        x_next = self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(np.asarray(u, dtype=float))
        if w is not None:
            x_next = x_next + w
        return x_next


def solve_dare(sys: LinearSystem, cost: QuadCost, max_iters: int = 10_000, tol: float = DARE_TOL) -> LqrSolution:
    """LQR solution by fixed-point Riccati iteration started at ``P = Q``.

    Returns ``P``, the gain ``K = -(R + B'PB)^{-1} B'PA`` (so ``u = K x``),
    and the closed loop ``A + BK``.
    """
    A, B, Q, R = sys.A, sys.B, cost.Q, cost.R
    if Q.shape != A.shape or R.shape != (sys.d_u, sys.d_u):
        raise InvalidInput("cost dimensions do not match the system")
    P, _, iters = _dare_iterate(A, B, Q, R, max_iters, tol)
    res = riccati_residual(A, B, Q, R, P)
    K = -lu_solve(R + B.T @ P @ B, B.T @ P @ A)
    A_K = A + B @ K
    if spectral_radius(A_K) >= 1.0:
        raise NonConvergence("Riccati fixed point does not stabilize the closed loop")
    return LqrSolution(P=P, K=K, A_K=A_K, riccati_residual=res, iterations=iters)


@dataclass(frozen=True)
class StabilityEnvelope:
    """Constants with ``||A_K^k||_2 <= tau * rho**k`` for ``k <= K_check``."""

    tau: float
    rho: float
    kappa: float
    k_check: int = K_CHECK


def stability_envelope(A_K, k_check: int = K_CHECK) -> StabilityEnvelope:
    A_K = np.asarray(A_K, dtype=float)
    sr = spectral_radius(A_K)
    if sr >= 1.0:
        raise UnstableMatrix(f"spectral radius {sr:.6g} >= 1")
    rho = (1.0 + sr) / 2.0
    tau = 1.0
    Mk = np.eye(A_K.shape[0])
    for k in range(1, k_check + 1):
        Mk = Mk @ A_K
        tau = max(tau, np.linalg.norm(Mk, 2) / rho**k)
    return StabilityEnvelope(tau=float(tau), rho=float(rho), kappa=float(tau / (1.0 - rho)), k_check=k_check)
