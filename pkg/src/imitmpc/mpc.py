"""Nominal and tightened finite-horizon MPC on top of the ADMM QP solver.

The decision vector stacks the predicted states and inputs,
``z = (x_1, ..., x_N, u_0, ..., u_{N-1})``, and the dynamics enter as
equality constraints. Ellipsoidal terminal sets are handled with a
Lagrange multiplier on ``x_N' P x_N <= c``: for a fixed multiplier the
problem is again a QP, and the multiplier is found by a bracketing search
(see :func:`multiplier_search`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .errors import EmptyTightenedSet, InfeasibleState, InvalidInput
from .numerics import LinearSystem, LqrSolution, QuadCost, solve_dare
from .qp import QpProblem, QpSolution, QpSolver, QpStatus
from .sets import (Ball, EllipsoidLevelSet, Polytope, contains, lqr_levelset,
                   max_positive_invariant, pontryagin_diff)

FEAS_TOL = 1e-6


class TerminalMode(enum.Enum):
    NONE = "none"
    LQR_COST = "lqr_cost"
    LQR_COST_AND_SET = "lqr_cost_and_set"


@dataclass(frozen=True)
class MpcSpec:
    sys: LinearSystem
    cost: QuadCost
    N: int
    X: Polytope
    U: Polytope
    X_f: Polytope | EllipsoidLevelSet | None = None
    terminal_mode: TerminalMode = TerminalMode.LQR_COST
    lqr: LqrSolution | None = None

    def __post_init__(self):
        if self.N < 1:
            raise InvalidInput("horizon must be at least 1")
        if self.X.dim != self.sys.d_x or self.U.dim != self.sys.d_u:
            raise InvalidInput("constraint set dimensions do not match the system")
        if self.X.empty or self.U.empty:
            raise EmptyTightenedSet("empty state or input constraint set")
        if self.lqr is None:
            object.__setattr__(self, "lqr", solve_dare(self.sys, self.cost))
        if self.terminal_mode is not TerminalMode.NONE:
            if np.linalg.norm(self.cost.P_f - self.lqr.P, "fro") > 1e-8 * max(1.0, np.linalg.norm(self.lqr.P)):
                raise InvalidInput("terminal weight must equal the Riccati solution")
        if self.terminal_mode is TerminalMode.LQR_COST_AND_SET and self.X_f is None:
            raise InvalidInput("terminal set required for LQR_COST_AND_SET")
        if self.terminal_mode is not TerminalMode.LQR_COST_AND_SET and self.X_f is not None:
            object.__setattr__(self, "X_f", None)

    @property
    def K(self) -> np.ndarray:
        return self.lqr.K


def make_mpc_spec(sys: LinearSystem, Q, R, N: int, X: Polytope, U: Polytope,
                  terminal_mode: TerminalMode = TerminalMode.LQR_COST,
                  terminal_set: str = "polytope") -> MpcSpec:
    """Spec with ``P_f = P_lqr`` and (optionally) the LQR invariant terminal set.

    ``terminal_set`` selects the polytopic maximal invariant set
    (``"polytope"``) or the ellipsoidal level set (``"levelset"``).
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if terminal_mode is TerminalMode.NONE:
        cost = QuadCost(Q, R, Q)
        return MpcSpec(sys, cost, N, X, U, None, terminal_mode)
    lqr = solve_dare(sys, QuadCost(Q, R, Q))
    cost = QuadCost(Q, R, lqr.P)
    X_f = None
    if terminal_mode is TerminalMode.LQR_COST_AND_SET:
        X_f = _terminal_set(lqr, X, U, terminal_set)
    return MpcSpec(sys, cost, N, X, U, X_f, terminal_mode, lqr)


def _terminal_set(lqr: LqrSolution, X, U, kind):
    if kind == "polytope":
        rep = max_positive_invariant(lqr.A_K, X, U, lqr.K)
        if not rep.converged:
            raise InvalidInput("maximal invariant set iteration did not converge")
        return rep.O_inf
    if kind == "levelset":
        return lqr_levelset(lqr.P, lqr.K, X, U)
    raise InvalidInput(f"unknown terminal set kind {kind!r}")


@dataclass(frozen=True)
class MpcSolution:
    u_seq: np.ndarray
    x_seq: np.ndarray
    objective: float
    status: QpStatus
    qp: QpSolution | None = None
    multiplier: float = 0.0


def _block_diag(blocks):
    return sla.block_diag(*blocks) if blocks else np.zeros((0, 0))


def _structure(spec: MpcSpec, free_initial: bool = False, extra_terminal: bool = True):
    """Shared QP matrices.

    With ``free_initial`` the initial state is a decision variable (robust
    MPC); otherwise it enters only through the equality right-hand side.
    Returns ``(H, A_eq, A_in, b_in, layout)``.
    """
    sysm, cost, N = spec.sys, spec.cost, spec.N
    dx, du = sysm.d_x, sysm.d_u
    A, B = sysm.A, sysm.B
    nxs = (N + 1) if free_initial else N
    nx_tot, nu_tot = nxs * dx, N * du
    n = nx_tot + nu_tot
    off = 0 if free_initial else -1  # column block of x_k is k + off

    def xcol(k):
        return slice((k + off) * dx, (k + off + 1) * dx)

    def ucol(k):
        return slice(nx_tot + k * du, nx_tot + (k + 1) * du)

    state_w = [cost.Q] * (N - 1) + [cost.P_f]
    if free_initial:
        state_w = [cost.Q] + state_w
    H = 2.0 * _block_diag(state_w + [cost.R] * N)

    A_eq = np.zeros((N * dx, n))
    for k in range(N):
        rows = slice(k * dx, (k + 1) * dx)
        A_eq[rows, xcol(k + 1)] = np.eye(dx)
        A_eq[rows, ucol(k)] = -B
        if k > 0 or free_initial:
            A_eq[rows, xcol(k)] = -A

    G_rows, h_rows = [], []
    first = 0 if free_initial else 1
    for k in range(first, N + 1):
        Gk = np.zeros((spec.X.G.shape[0], n))
        Gk[:, xcol(k)] = spec.X.G
        G_rows.append(Gk)
        h_rows.append(spec.X.h)
    for k in range(N):
        Gk = np.zeros((spec.U.G.shape[0], n))
        Gk[:, ucol(k)] = spec.U.G
        G_rows.append(Gk)
        h_rows.append(spec.U.h)
    X_f = spec.X_f if extra_terminal else None
    if isinstance(X_f, EllipsoidLevelSet):
        X_f = X_f.bounding_box()
    if X_f is not None:
        Gk = np.zeros((X_f.G.shape[0], n))
        Gk[:, xcol(N)] = X_f.G
        G_rows.append(Gk)
        h_rows.append(X_f.h)
    A_in = np.vstack(G_rows)
    b_in = np.concatenate(h_rows)
    layout = dict(n=n, dx=dx, du=du, N=N, nx_tot=nx_tot, xcol=xcol, ucol=ucol)
    return H, A_eq, A_in, b_in, layout


def build_qp(spec: MpcSpec, x0) -> QpProblem:
    """QP of the finite-horizon problem at initial state ``x0``.

    The constant ``x0'Qx0`` is not part of the QP objective.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != spec.sys.d_x or not np.all(np.isfinite(x0)):
        raise InvalidInput("initial state has wrong size or is not finite")
    H, A_eq, A_in, b_in, lay = _structure(spec)
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[: lay["dx"]] = spec.sys.A @ x0
    return QpProblem(H, np.zeros(lay["n"]), A_eq, b_eq, A_in, b_in)


def radial_retract(feasible, x, iters: int = 30) -> np.ndarray:
    """Largest ``s x`` with ``s`` in [0, 1] accepted by ``feasible``, by bisection.

    Valid for convex feasible sets that contain the origin.
    """
    x = np.asarray(x, dtype=float)
    if feasible(x):
        return x
    if not feasible(np.zeros_like(x)):
        raise InfeasibleState("the origin is not feasible", x)
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid * x):
            lo = mid
        else:
            hi = mid
    return lo * x


def multiplier_search(solve_mu, violation, mu_start=1.0, max_expand=40, max_iter=80):
    """Find the multiplier of a single convex quadratic constraint.

    ``solve_mu(mu)`` returns a solution of the QP with ``mu * q(z)`` added to
    the objective and ``violation(sol)`` the (normalized) constraint value
    ``q(z)/bound - 1``; violation is nonincreasing in ``mu``. Returns the
    solution at the smallest bracketed multiplier that satisfies the
    constraint to within 1e-10 (relative).
    """
    sol = solve_mu(0.0)
    f0 = violation(sol)
    if f0 <= 1e-12:
        return sol, 0.0
    lo, f_lo = 0.0, f0
    hi = mu_start
    for _ in range(max_expand):
        sol_hi = solve_mu(hi)
        f_hi = violation(sol_hi)
        if f_hi <= 0:
            break
        lo, f_lo = hi, f_hi
        hi *= 10.0
    else:
        raise InfeasibleState("quadratic constraint cannot be satisfied")
    side = 0
    for _ in range(max_iter):
        if f_hi >= -1e-10 or hi - lo <= 1e-14 * hi:
            break
        # Illinois variant of regula falsi
        mu = hi - f_hi * (hi - lo) / (f_hi - f_lo)
        if not lo < mu < hi:
            mu = 0.5 * (lo + hi)
        sol_mu = solve_mu(mu)
        f_mu = violation(sol_mu)
        if f_mu <= 0:
            hi, f_hi, sol_hi = mu, f_mu, sol_mu
            if side == -1:
                f_lo *= 0.5
            side = -1
        else:
            lo, f_lo = mu, f_mu
            if side == 1:
                f_hi *= 0.5
            side = 1
    return sol_hi, hi


class MpcController:
    """Receding-horizon controller with per-instance warm starts."""

    def __init__(self, spec: MpcSpec, **solver_options):
        self.spec = spec
        self.H, self.A_eq, self.A_in, self.b_in, self.layout = _structure(spec)
        self.solver = QpSolver(self.H, self.A_eq, self.A_in, **solver_options)
        self._solver_options = solver_options
        self._phase1 = None
        self._domain = None
        self._warm = None
        self.n_solves = 0

    # -- helpers ----------------------------------------------------------
    def _b_eq(self, x0):
        b_eq = np.zeros(self.A_eq.shape[0])
        b_eq[: self.layout["dx"]] = self.spec.sys.A @ x0
        return b_eq

    def _unpack(self, x0, z):
        lay = self.layout
        N, dx, du = lay["N"], lay["dx"], lay["du"]
        xs = np.vstack([x0, z[: lay["nx_tot"]].reshape(N, dx)])
        us = z[lay["nx_tot"]:].reshape(N, du)
        return xs, us

    def _check_state(self, x0):
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.size != self.spec.sys.d_x or not np.all(np.isfinite(x0)):
            raise InfeasibleState("state is not finite or has wrong size", x0)
        if not contains(self.spec.X, x0, FEAS_TOL):
            raise InfeasibleState("state violates the state constraints", x0)
        return x0

    def _terminal_solver(self, mu):
        lay = self.layout
        H = self.H.copy()
        sl = lay["xcol"](lay["N"])
        H[sl, sl] += 2.0 * mu * self.spec.X_f.P
        return QpSolver(H, self.A_eq, self.A_in, **self._solver_options)

    # -- public API -------------------------------------------------------
    def solve(self, x0) -> MpcSolution:
        x0 = self._check_state(x0)
        b_eq = self._b_eq(x0)
        n = self.layout["n"]
        g = np.zeros(n)
        X_f = self.spec.X_f
        mu = 0.0
        if isinstance(X_f, EllipsoidLevelSet):
            sl = self.layout["xcol"](self.layout["N"])

            def solve_mu(m):
                solver = self.solver if m == 0.0 else self._terminal_solver(m)
                s = solver.solve(g, b_eq, self.b_in, warm_start=self._warm)
                self.n_solves += 1
                if not s.ok:
                    raise InfeasibleState(f"MPC QP status {s.status.value}", x0)
                return s

            def violation(s):
                xN = s.z[sl]
                return float(xN @ X_f.P @ xN) / X_f.c - 1.0

            sol, mu = multiplier_search(solve_mu, violation)
        else:
            sol = self.solver.solve(g, b_eq, self.b_in, warm_start=self._warm)
            self.n_solves += 1
            if not sol.ok:
                raise InfeasibleState(f"MPC QP status {sol.status.value}", x0)
        self._warm = sol.z
        xs, us = self._unpack(x0, sol.z)
        obj = 0.5 * sol.z @ self.H @ sol.z + float(x0 @ self.spec.cost.Q @ x0)
        return MpcSolution(u_seq=us, x_seq=xs, objective=float(obj), status=sol.status, qp=sol, multiplier=mu)

    def control(self, x) -> np.ndarray:
        return self.solve(x).u_seq[0]

    def __call__(self, x, t=0):
        return self.control(x)

    def value(self, x) -> float:
        return self.solve(x).objective

    def project_to_domain(self, x, shrink: float = 1e-2) -> np.ndarray:
        """Nearest state with a feasible MPC problem, pulled by ``shrink`` toward the origin.

        The feasible domain is convex and contains the origin, so the pull
        moves the boundary point into the interior.
        """
        if isinstance(self.spec.X_f, EllipsoidLevelSet):
            raise InvalidInput("domain projection needs a polytopic terminal set")
        x = np.asarray(x, dtype=float).reshape(-1)
        if self._domain is None:
            H, A_eq, A_in, b_in, lay = _structure(self.spec, free_initial=True)
            dx = lay["dx"]
            Hp = np.zeros_like(H)
            Hp[:dx, :dx] = 2.0 * np.eye(dx)
            self._domain = (QpSolver(Hp, A_eq, A_in, **self._solver_options), b_in, lay["n"])
        solver, b_in, n = self._domain
        g = np.zeros(n)
        g[: x.size] = -2.0 * x
        sol = solver.solve(g, np.zeros(solver.p), b_in)
        cand = (1.0 - shrink) * sol.z[: x.size]
        if sol.ok or self.is_feasible(cand):
            return cand
        # inaccurate projection: retreat along the ray to the origin instead
        return (1.0 - shrink) * radial_retract(self.is_feasible, x)

    def is_feasible(self, x) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        try:
            x = self._check_state(x)
        except InfeasibleState:
            return False
        n = self.layout["n"]
        if self._phase1 is None:
            self._phase1 = QpSolver(np.zeros((n, n)), self.A_eq, self.A_in, **self._solver_options)
        sol = self._phase1.solve(np.zeros(n), self._b_eq(x), self.b_in)
        if sol.status is not QpStatus.OPTIMAL:
            return False
        X_f = self.spec.X_f
        if isinstance(X_f, EllipsoidLevelSet):
            # smallest reachable terminal level decides membership
            lay = self.layout
            H = np.zeros((n, n))
            sl = lay["xcol"](lay["N"])
            H[sl, sl] = 2.0 * X_f.P
            s2 = QpSolver(H, self.A_eq, self.A_in, **self._solver_options).solve(np.zeros(n), self._b_eq(x), self.b_in)
            if not s2.ok:
                return False
            xN = s2.z[sl]
            return float(xN @ X_f.P @ xN) <= X_f.c * (1 + 1e-9)
        return True


def mpc_control(spec: MpcSpec, x) -> np.ndarray:
    return MpcController(spec).control(x)


def is_feasible(spec: MpcSpec, x) -> bool:
    return MpcController(spec).is_feasible(x)


def tightened_spec(spec: MpcSpec, Z: Ball, K=None, terminal_set: str | None = None,
                   tube=None) -> MpcSpec:
    """Constraints ``X - Z`` and ``U - K Z``, terminal set rebuilt on them.

    ``K Z`` is outer-bounded by the ball of radius ``||K||_2 * radius(Z)``.
    When a ``tube`` set is given as well (any set with a support function and
    a ``linear_image``), each row is shrunk by the larger of the two supports,
    so the result is valid for both.
    """
    K = spec.K if K is None else np.atleast_2d(np.asarray(K, dtype=float))
    x_sets = [Z]
    u_sets = [Ball(np.linalg.norm(K, 2) * Z.radius, spec.sys.d_u)]
    if tube is not None:
        x_sets.append(tube)
        u_sets.append(tube.linear_image(K))
    X_bar = pontryagin_diff(spec.X, x_sets)
    U_bar = pontryagin_diff(spec.U, u_sets)
    if X_bar.empty or U_bar.empty:
        raise EmptyTightenedSet(f"tightening by a ball of radius {Z.radius:.4g} empties the constraints")
    X_f = None
    if spec.terminal_mode is TerminalMode.LQR_COST_AND_SET:
        kind = terminal_set or ("levelset" if isinstance(spec.X_f, EllipsoidLevelSet) else "polytope")
        X_f = _terminal_set(spec.lqr, X_bar, U_bar, kind)
    return replace(spec, X=X_bar, U=U_bar, X_f=X_f)
