"""Dense convex QP solver (ADMM with over-relaxation and solution polishing).

Solves::

    minimize    1/2 z'Hz + g'z
    subject to  A_eq z  = b_eq
                A_in z <= b_in

Equality constraints are kept inside the linear system of the z-update
instead of being split into paired inequalities. Once the iterates are
moderately accurate the solver guesses the active set and solves the
reduced KKT system directly ("polishing"), which yields solutions accurate
to near machine precision whenever the guess is right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InvalidInput

EPS_ABS = 1e-8
EPS_REL = 1e-6
EPS_PINF = 1e-6
MAX_ITERS = 20_000
OPTIMAL_RESIDUAL = 1e-6


class QpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise InvalidInput(f"H must be square, got {H.shape}")
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if g.shape != (n,):
            raise InvalidInput("g has the wrong length")
        A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).reshape(-1)
        A_in = np.zeros((0, n)) if self.A_in is None else np.asarray(self.A_in, dtype=float).reshape(-1, n)
        b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).reshape(-1)
        if A_eq.shape[0] != b_eq.shape[0] or A_in.shape[0] != b_in.shape[0]:
            raise InvalidInput("constraint matrix/vector sizes differ")
        for name, v in (("H", H), ("g", g), ("A_eq", A_eq), ("b_eq", b_eq), ("A_in", A_in)):
            if not np.all(np.isfinite(v)):
                raise InvalidInput(f"{name} has non-finite entries")
        if np.any(np.isnan(b_in)):
            raise InvalidInput("b_in has NaN entries")
        object.__setattr__(self, "H", (H + H.T) / 2)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_in", b_in)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z)


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    y_in: np.ndarray | None = None
    y_eq: np.ndarray | None = None
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def residuals(p: QpProblem, z, y_in, y_eq):
    """Unscaled primal and dual infinity-norm residuals."""
    r_eq = p.A_eq @ z - p.b_eq
    r_in = np.maximum(p.A_in @ z - p.b_in, 0.0)
    prim = max(np.abs(r_eq).max(initial=0.0), r_in.max(initial=0.0))
    stat = p.H @ z + p.g + p.A_in.T @ y_in + p.A_eq.T @ y_eq
    return float(prim), float(np.abs(stat).max(initial=0.0))


def _ruiz(H, A, iters=15):
    """Ruiz equilibration of the KKT matrix [[H, A'], [A, 0]]."""
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, As = H.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Hs).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        row = np.abs(As).max(axis=1, initial=0.0)
        dc = 1.0 / np.sqrt(np.where(col > 1e-8, col, 1.0))
        dr = 1.0 / np.sqrt(np.where(row > 1e-8, row, 1.0))
        dc = np.clip(dc, 1e-4, 1e4)
        dr = np.clip(dr, 1e-4, 1e4)
        Hs = dc[:, None] * Hs * dc[None, :]
        As = dr[:, None] * As * dc[None, :]
        D *= dc
        E *= dr
    return D, E


class QpSolver:
    """ADMM solver bound to one constraint structure.

    ``H``, ``A_eq`` and ``A_in`` are fixed at construction; ``g``, ``b_eq``
    and ``b_in`` may change between calls to :meth:`solve`, which is how the
    MPC controllers reuse the cached factorizations across states. One
    instance is not thread-safe.
    """

    def __init__(self, H, A_eq, A_in, *, sigma=1e-6, alpha=1.6, rho=0.1,
                 eps_abs=EPS_ABS, eps_rel=EPS_REL, max_iters=MAX_ITERS,
                 polish=True, check_every=25, polish_window=1e5):
        H = np.asarray(H, dtype=float)
        self.n = H.shape[0]
        A_eq = np.asarray(A_eq, dtype=float).reshape(-1, self.n)
        A_in = np.asarray(A_in, dtype=float).reshape(-1, self.n)
        self.H, self.A_eq, self.A_in = (H + H.T) / 2, A_eq, A_in
        self.p, self.m = A_eq.shape[0], A_in.shape[0]
        self.sigma, self.alpha = sigma, alpha
        self.rho0 = rho
        self.eps_abs, self.eps_rel = eps_abs, eps_rel
        self.max_iters = max_iters
        self.polish = polish
        self.check_every = check_every
        self.polish_window = polish_window

        A_all = np.vstack([A_eq, A_in])
        D, E = _ruiz(self.H, A_all)
        self.D = D
        self.E_eq, self.E_in = E[: self.p], E[self.p:]
        Hs = D[:, None] * self.H * D[None, :]
        self.c = 1.0 / max(np.abs(Hs).max(initial=0.0), 1e-8) if self.n else 1.0
        self.c = float(np.clip(self.c, 1e-4, 1e4))
        self.Hs = self.c * Hs
        self.Aeq_s = self.E_eq[:, None] * A_eq * D[None, :]
        self.Ain_s = self.E_in[:, None] * A_in * D[None, :]
        self._factors = {}
        self._warm = None

    # -- linear algebra -------------------------------------------------
    def _factor(self, rho):
        key = round(4 * math.log10(rho))
        f = self._factors.get(key)
        if f is None:
            rho_q = 10.0 ** (key / 4)
            M = self.Hs + self.sigma * np.eye(self.n) + rho_q * self.Ain_s.T @ self.Ain_s
            K = np.block([[M, self.Aeq_s.T], [self.Aeq_s, -1e-12 * np.eye(self.p)]])
            f = (rho_q, sla.lu_factor(K, check_finite=False))
            self._factors[key] = f
        return f

    # -- main loop --------------------------------------------------------
    def solve(self, g, b_eq=None, b_in=None, warm_start=None, warm_dual=None) -> QpSolution:
        n, p, m = self.n, self.p, self.m
        g = np.asarray(g, dtype=float).reshape(n)
        b_eq = np.zeros(p) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(p)
        b_in = np.zeros(m) if b_in is None else np.asarray(b_in, dtype=float).reshape(m)
        prob = QpProblem(self.H, g, self.A_eq, b_eq, self.A_in, b_in)

        D, c = self.D, self.c
        gs = c * D * g
        beq_s = self.E_eq * b_eq
        bin_s = self.E_in * b_in

        x = np.zeros(n)
        z = np.zeros(m)
        y = np.zeros(m)
        if warm_start is not None:
            x = np.asarray(warm_start, dtype=float).reshape(n) / D
            z = np.minimum(self.Ain_s @ x, bin_s)
        if warm_dual is not None:
            y = c * np.asarray(warm_dual, dtype=float).reshape(m) / self.E_in
        nu = np.zeros(p)

        rho = self.rho0
        rho_q, fac = self._factor(rho)
        alpha, sigma = self.alpha, self.sigma
        last_polish_set = None
        polish_budget = 20
        it = 0
        for it in range(1, self.max_iters + 1):
            y_prev, nu_prev = y, nu
            rhs = np.concatenate([sigma * x - gs + self.Ain_s.T @ (rho_q * z - y), beq_s])
            sol = sla.lu_solve(fac, rhs, check_finite=False)
            xt, nu = sol[:n], sol[n:]
            zt = self.Ain_s @ xt
            x = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z = np.minimum(zr + y / rho_q, bin_s)
            y = y + rho_q * (zr - z)

            if it % self.check_every and it != 1:
                continue

            # unscaled quantities
            xu = D * x
            yu = self.E_in * y / c
            nuu = self.E_eq * nu / c
            Ax = self.Ain_s @ x
            r_prim = np.abs((Ax - z) / self.E_in).max(initial=0.0)
            r_prim = max(r_prim, np.abs((self.Aeq_s @ x - beq_s) / self.E_eq).max(initial=0.0))
            Hx = self.H @ xu
            Aty = self.A_in.T @ yu
            Aeq_nu = self.A_eq.T @ nuu
            r_dual = np.abs(Hx + g + Aty + Aeq_nu).max(initial=0.0)
            s_prim = max(np.abs(Ax / self.E_in).max(initial=0.0), np.abs(z / self.E_in).max(initial=0.0))
            s_dual = max(np.abs(Hx).max(initial=0.0), np.abs(Aty).max(initial=0.0),
                         np.abs(Aeq_nu).max(initial=0.0), np.abs(g).max(initial=0.0))
            eps_p = self.eps_abs + self.eps_rel * s_prim
            eps_d = self.eps_abs + self.eps_rel * s_dual

            if (self.polish and polish_budget > 0 and r_prim <= self.polish_window * eps_p
                    and r_dual <= self.polish_window * eps_d):
                active = (bin_s - z) < y
                key = active.tobytes()
                if key != last_polish_set:
                    last_polish_set = key
                    polish_budget -= 1
                    polished = self._polish(prob, active, it)
                    if polished is not None:
                        return polished

            if r_prim <= eps_p and r_dual <= eps_d and r_prim <= OPTIMAL_RESIDUAL and r_dual <= OPTIMAL_RESIDUAL:
                return self._finish(prob, xu, yu, nuu, QpStatus.OPTIMAL, it)

            if self._certificate(y - y_prev, nu - nu_prev, bin_s, beq_s):
                return QpSolution(z=xu, objective=math.inf, status=QpStatus.INFEASIBLE,
                                  primal_residual=float(r_prim), dual_residual=float(r_dual), iterations=it)

            # residual balancing
            if it % (4 * self.check_every) == 0 and r_prim > 0 and r_dual > 0:
                ratio = math.sqrt((r_prim / max(s_prim, 1e-12)) / (r_dual / max(s_dual, 1e-12)))
                new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    old = rho_q
                    rho_q, fac = self._factor(rho)
                    # keep y consistent is automatic; nothing else depends on rho
                    del old

        xu, yu, nuu = D * x, self.E_in * y / c, self.E_eq * nu / c
        return self._finish(prob, xu, yu, nuu, QpStatus.MAX_ITERS, it)

    def _certificate(self, dy, dnu, bin_s, beq_s):
        if self.m == 0:
            return False
        dy_u = self.E_in * dy
        dnu_u = self.E_eq * dnu
        scale = max(np.abs(dy_u).max(initial=0.0), np.abs(dnu_u).max(initial=0.0))
        if scale < 1e-10:
            return False
        if np.any(dy_u < -EPS_PINF * scale):
            return False
        lhs = np.abs(self.A_in.T @ dy_u + self.A_eq.T @ dnu_u).max(initial=0.0)
        finite = np.isfinite(bin_s)
        if np.any(dy_u[~finite] > EPS_PINF * scale):
            return False
        supp = (bin_s[finite] / self.E_in[finite]) @ dy_u[finite] + (beq_s / self.E_eq) @ dnu_u
        return lhs <= EPS_PINF * scale and supp < -EPS_PINF * scale

    def _polish(self, prob: QpProblem, active, it, rounds: int = 50):
        """Solve the equality-constrained problem on a guessed active set.

        Degenerate problems often have more rows at their bound than the
        multipliers need; rows whose multipliers come out negative are
        dropped and violated inactive rows added, for a few rounds.
        """
        active = np.array(active, dtype=bool)
        for _ in range(rounds):
            out = self._polish_once(prob, active)
            if out is None:
                return None
            z, y_in, y_eq = out
            viol = prob.A_in @ z - prob.b_in
            scale = 1.0 + max(np.abs(z).max(initial=0.0), np.abs(prob.b_in[np.isfinite(prob.b_in)]).max(initial=0.0))
            ymax = np.abs(y_in).max(initial=0.0)
            neg = active & (y_in < -1e-9 * (1.0 + ymax))
            bad = ~active & (viol > 1e-9 * scale)
            if not neg.any() and not bad.any():
                break
            if neg.any():
                active[np.argmin(np.where(neg, y_in, np.inf))] = False
            if bad.any():
                active[np.argmax(np.where(bad, viol, -np.inf))] = True
        else:
            return None
        y_in = np.maximum(y_in, 0.0)
        prim, dual = residuals(prob, z, y_in, y_eq)
        if prim > 1e-9 * scale or dual > 1e-9 * (1.0 + np.abs(prob.g).max(initial=0.0) + np.abs(y_in).max(initial=0.0)):
            return None
        if prim > OPTIMAL_RESIDUAL or dual > OPTIMAL_RESIDUAL:
            return None
        return QpSolution(z=z, objective=prob.objective(z), status=QpStatus.OPTIMAL,
                          primal_residual=prim, dual_residual=dual, iterations=it,
                          y_in=y_in, y_eq=y_eq, polished=True)

    def _polish_once(self, prob: QpProblem, active):
        n, p = self.n, self.p
        A_act = prob.A_in[active]
        b_act = prob.b_in[active]
        k = A_act.shape[0]
        delta = 1e-10
        Kmat = np.block([
            [prob.H, prob.A_eq.T, A_act.T],
            [prob.A_eq, np.zeros((p, p)), np.zeros((p, k))],
            [A_act, np.zeros((k, p)), np.zeros((k, k))],
        ])
        reg = np.concatenate([np.full(n, delta), np.full(p + k, -delta)])
        rhs = np.concatenate([-prob.g, prob.b_eq, b_act])
        try:
            fac = sla.lu_factor(Kmat + np.diag(reg), check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        sol = sla.lu_solve(fac, rhs, check_finite=False)
        for _ in range(5):
            sol = sol + sla.lu_solve(fac, rhs - Kmat @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        y_in = np.zeros(prob.A_in.shape[0])
        y_in[active] = sol[n + p:]
        return sol[:n], y_in, sol[n:n + p]

    def _finish(self, prob, z, y_in, y_eq, status, it):
        prim, dual = residuals(prob, z, np.maximum(y_in, 0.0), y_eq)
        return QpSolution(z=z, objective=prob.objective(z), status=status,
                          primal_residual=prim, dual_residual=dual, iterations=it,
                          y_in=np.maximum(y_in, 0.0), y_eq=y_eq)


def solve_qp(p: QpProblem, warm_start=None, **options) -> QpSolution:
    """One-shot solve of a :class:`QpProblem`."""
    solver = QpSolver(p.H, p.A_eq, p.A_in, **options)
    return solver.solve(p.g, p.b_eq, p.b_in, warm_start=warm_start)


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float
    dual_feasibility: float
    passed: bool


def check_kkt(p: QpProblem, sol: QpSolution, tol: float = 1e-5) -> KktReport:
    """Check optimality of ``sol.z`` with multipliers rebuilt from scratch.

    Multipliers of the equality rows and of the (nearly) active inequality
    rows are fitted by least squares to the stationarity condition; the
    solver's own duals are not used.
    """
    z = np.asarray(sol.z, dtype=float)
    slack = p.b_in - p.A_in @ z
    primal = max(np.abs(p.A_eq @ z - p.b_eq).max(initial=0.0), np.maximum(-slack, 0.0).max(initial=0.0))
    act_tol = max(tol, 1e-7) * (1.0 + np.abs(p.b_in[np.isfinite(p.b_in)]).max(initial=0.0))
    active = slack <= act_tol
    M = np.vstack([p.A_eq, p.A_in[active]]).T
    grad = p.H @ z + p.g
    if M.shape[1]:
        lam, *_ = np.linalg.lstsq(M, -grad, rcond=None)
    else:
        lam = np.zeros(0)
    y_eq = lam[: p.A_eq.shape[0]]
    y_act = lam[p.A_eq.shape[0]:]
    y_in = np.zeros(p.A_in.shape[0])
    y_in[active] = y_act
    stationarity = float(np.abs(grad + p.A_eq.T @ y_eq + p.A_in.T @ y_in).max(initial=0.0))
    dual_feas = float(np.maximum(-y_in, 0.0).max(initial=0.0))
    compl = float(np.abs(y_in * np.where(np.isfinite(slack), slack, 0.0)).max(initial=0.0))
    passed = stationarity <= tol and primal <= tol and compl <= tol and dual_feas <= tol
    return KktReport(stationarity, float(primal), compl, dual_feas, bool(passed))
