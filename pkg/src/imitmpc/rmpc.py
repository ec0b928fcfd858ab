"""Tube-based robust MPC with the nominal initial state as a decision variable.

The controller solves the tightened finite-horizon problem over
``(x̄_0, x̄_1..x̄_N, ū_0..ū_{N-1})`` subject to ``x - x̄_0 in Z_tube`` and
applies ``ū_0 + K (x - x̄_0)``.

``Z_tube`` is a disturbance invariant zonotope (``A_K Z + B(eps) in Z``)
whose supports never exceed those of the ball ``B(kappa * eps)`` used for the
tightening in the benchmark configurations; when they do, the tightening
takes the larger support. Being a zonotope, the tube constraint is linear in
the generator weights ``lam`` (``x - x̄_0 = G lam``, ``|lam| <= 1``), so every
solve is a single QP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleState, InvalidInput
from .mpc import FEAS_TOL, MpcSpec, _structure, multiplier_search, radial_retract, tightened_spec
from .numerics import stability_envelope
from .qp import QpSolver, QpStatus
from .sets import (Ball, EllipsoidLevelSet, Polytope, Zonotope, contains,
                   disturbance_invariant_zonotope, min_disturbance_invariant_bound)
from .sim import Trajectory


@dataclass(frozen=True)
class RmpcSpec:
    base: MpcSpec          # tightened problem
    Z: Ball                # outer ball B(kappa * eps)
    K: np.ndarray
    eps: float
    X: Polytope            # original constraints
    U: Polytope
    tube: Zonotope | None = None

    def __post_init__(self):
        if self.tube is None:
            object.__setattr__(self, "tube", disturbance_invariant_zonotope(self.base.lqr.A_K, self.eps))

    @property
    def sys(self):
        return self.base.sys

    @property
    def cost(self):
        return self.base.cost


def make_rmpc_spec(nominal: MpcSpec, eps: float, terminal_set: str | None = None,
                   alpha: float = 0.05) -> RmpcSpec:
    """Tube from the stability envelope, then tightened constraints."""
    env = stability_envelope(nominal.lqr.A_K)
    Z = min_disturbance_invariant_bound(env, eps, nominal.sys.d_x)
    tube = disturbance_invariant_zonotope(nominal.lqr.A_K, eps, alpha)
    base = tightened_spec(nominal, Z, nominal.K, terminal_set, tube=tube)
    return RmpcSpec(base=base, Z=Z, K=nominal.K, eps=eps, X=nominal.X, U=nominal.U, tube=tube)


@dataclass(frozen=True)
class RmpcSolution:
    x_bar0: np.ndarray
    u_bar_seq: np.ndarray
    x_bar_seq: np.ndarray
    objective: float
    status: QpStatus
    state: np.ndarray | None = None    # the (possibly projected) query state
    multiplier: float = 0.0


class RobustMpcController:
    """Stateful (warm-started) robust MPC controller; one rollout at a time.

    Query states outside ``X`` are first projected onto ``X`` (boxes only)
    when ``project`` is set; otherwise they raise ``InfeasibleState``.
    """

    def __init__(self, spec: RmpcSpec, project: bool = True, **solver_options):
        self.spec = spec
        self.project = project
        H, A_eq, A_in, b_in, self.layout = _structure(spec.base, free_initial=True)
        dx = spec.sys.d_x
        n0 = self.layout["n"]
        G = spec.tube.generators
        m = G.shape[1]
        n = n0 + m
        self.n = n
        self.H = np.zeros((n, n))
        self.H[:n0, :n0] = H
        # x̄_0 + G lam = x
        tube_eq = np.zeros((dx, n))
        tube_eq[:, :dx] = np.eye(dx)
        tube_eq[:, n0:] = G
        self.A_eq = np.vstack([np.hstack([A_eq, np.zeros((A_eq.shape[0], m))]), tube_eq])
        lam_rows = np.zeros((2 * m, n))
        lam_rows[:m, n0:] = np.eye(m)
        lam_rows[m:, n0:] = -np.eye(m)
        self.A_in = np.vstack([np.hstack([A_in, np.zeros((A_in.shape[0], m))]), lam_rows])
        self.b_in = np.concatenate([b_in, np.ones(2 * m)])
        self._n_dyn = A_eq.shape[0]
        self._opts = solver_options
        self.solver = QpSolver(self.H, self.A_eq, self.A_in, **solver_options)
        self._warm = None
        self._domain = None
        self.n_solves = 0

    def _terminal_solver(self, mu):
        lay = self.layout
        H = self.H.copy()
        sl = lay["xcol"](lay["N"])
        H[sl, sl] += 2.0 * mu * self.spec.base.X_f.P
        return QpSolver(H, self.A_eq, self.A_in, **self._opts)

    def _unpack(self, z):
        lay = self.layout
        N, dx, du = lay["N"], lay["dx"], lay["du"]
        xs = z[: lay["nx_tot"]].reshape(N + 1, dx)
        us = z[lay["nx_tot"]: lay["n"]].reshape(N, du)
        return xs, us

    def _query_state(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        X = self.spec.X
        if x.size != self.spec.sys.d_x or not np.all(np.isfinite(x)):
            raise InfeasibleState("state is not finite or has wrong size", x)
        if not contains(X, x, FEAS_TOL):
            if not (self.project and X.is_box):
                raise InfeasibleState("state violates the state constraints", x)
            x = X.project(x)
        return x

    def solve(self, x) -> RmpcSolution:
        x = self._query_state(x)
        b_eq = np.zeros(self.A_eq.shape[0])
        b_eq[self._n_dyn:] = x
        g = np.zeros(self.n)
        X_f = self.spec.base.X_f

        def solve_mu(mu):
            solver = self.solver if mu == 0.0 else self._terminal_solver(mu)
            s = solver.solve(g, b_eq, self.b_in, warm_start=self._warm)
            self.n_solves += 1
            if not s.ok:
                raise InfeasibleState(f"robust MPC QP status {s.status.value}", x)
            return s

        mu = 0.0
        if isinstance(X_f, EllipsoidLevelSet):
            sl = self.layout["xcol"](self.layout["N"])
            sol, mu = multiplier_search(solve_mu, lambda s: float(s.z[sl] @ X_f.P @ s.z[sl]) / X_f.c - 1.0)
        else:
            sol = solve_mu(0.0)
        self._warm = sol.z
        xs, us = self._unpack(sol.z)
        obj = 0.5 * sol.z @ self.H @ sol.z
        return RmpcSolution(x_bar0=xs[0], u_bar_seq=us, x_bar_seq=xs, objective=float(obj),
                            status=sol.status, state=x, multiplier=mu)

    def is_feasible(self, x) -> bool:
        """Whether the robust problem is feasible at ``x`` (after projection onto ``X``).

        Decided by the distance from ``x`` to its projection onto the
        feasible domain, which is always a feasible QP.
        """
        try:
            x = self._query_state(x)
        except InfeasibleState:
            return False
        if isinstance(self.spec.base.X_f, EllipsoidLevelSet):
            try:
                self.solve(x)
            except InfeasibleState:
                return False
            return True
        try:
            xp = self.project_to_domain(x, shrink=0.0)
        except InfeasibleState:
            return False
        return float(np.linalg.norm(xp - x)) <= 1e-7 * (1.0 + float(np.linalg.norm(x)))

    def project_to_domain(self, x, shrink: float = 1e-2) -> np.ndarray:
        """Nearest state with a feasible robust problem, pulled by ``shrink`` toward the origin."""
        x = np.asarray(x, dtype=float).reshape(-1)
        dx = x.size
        if isinstance(self.spec.base.X_f, EllipsoidLevelSet):
            raise InvalidInput("domain projection needs a polytopic terminal set")
        if self._domain is None:
            n = self.n + dx                     # extra block: the projected state
            H = np.zeros((n, n))
            H[self.n:, self.n:] = 2.0 * np.eye(dx)
            A_eq = np.hstack([self.A_eq, np.zeros((self.A_eq.shape[0], dx))])
            A_eq[self._n_dyn:, self.n:] = -np.eye(dx)
            X = self.spec.X
            A_in = np.vstack([np.hstack([self.A_in, np.zeros((self.A_in.shape[0], dx))]),
                              np.hstack([np.zeros((X.G.shape[0], self.n)), X.G])])
            b_in = np.concatenate([self.b_in, X.h])
            self._domain = (QpSolver(H, A_eq, A_in, **self._opts), b_in, n)
        solver, b_in, n = self._domain
        g = np.zeros(n)
        g[self.n:] = -2.0 * x
        sol = solver.solve(g, np.zeros(solver.p), b_in)
        cand = (1.0 - shrink) * sol.z[self.n:]
        if sol.ok or self._solvable(cand):
            return cand
        return (1.0 - shrink) * radial_retract(self._solvable, x)

    def _solvable(self, x) -> bool:
        try:
            self.solve(x)
        except InfeasibleState:
            return False
        return True

    def control_from(self, x, sol: RmpcSolution):
        x = sol.state if sol.state is not None else np.asarray(x, dtype=float)
        return sol.u_bar_seq[0] + self.spec.K @ (x - sol.x_bar0)

    def control(self, x):
        return self.control_from(x, self.solve(x))

    def __call__(self, x, t=0):
        return self.control(x)

    def value(self, x) -> float:
        return self.solve(x).objective


def rmpc_solve(spec: RmpcSpec, x) -> RmpcSolution:
    return RobustMpcController(spec).solve(x)


def rmpc_control(spec: RmpcSpec, x):
    return RobustMpcController(spec).control(x)


def worst_case_disturbance(spec: RmpcSpec, controller: RobustMpcController, rng=None):
    """Disturbance on the eps-sphere pushing the state away from the tube centre.

    The direction is that of ``A_K (x - x̄_0)``; a random unit direction is
    used when that vector vanishes (or always when ``rng`` is given and a
    coin flip says so, to mix adversarial and random directions).
    """
    A_K = spec.base.lqr.A_K
    eps = spec.eps

    def w(t, x, u):
        e = x - controller.last.x_bar0 if getattr(controller, "last", None) is not None else x
        v = A_K @ e
        nv = np.linalg.norm(v)
        if nv < 1e-12 or (rng is not None and rng.random() < 0.5):
            v = rng.standard_normal(x.size) if rng is not None else np.ones(x.size)
            nv = np.linalg.norm(v)
        return eps * v / nv

    return w


class RecordingRobustController(RobustMpcController):
    """Robust MPC that remembers its last solution (used by disturbance models)."""

    def __init__(self, spec: RmpcSpec, **solver_options):
        super().__init__(spec, **solver_options)
        self.last = None

    def control(self, x):
        self.last = self.solve(x)
        return self.control_from(x, self.last)


@dataclass
class TubeReport:
    containment: list = field(default_factory=list)     # ||x_t - x̄_0(x_t)|| per step
    value: list = field(default_factory=list)           # V(x_t)
    stage: list = field(default_factory=list)           # l(x̄_0(x_t), ū_0(x_t))
    decrease_gap: list = field(default_factory=list)    # V(x_{t+1}) - V(x_t) + l_t
    nominal_norm: list = field(default_factory=list)    # ||x̄_0(x_t)||
    input_ok: list = field(default_factory=list)
    state_ok: list = field(default_factory=list)
    infeasible_at: int | None = None
    containment_ok: bool = True
    decrease_ok: bool = True
    constraints_ok: bool = True

    @property
    def passed(self) -> bool:
        return self.infeasible_at is None and self.containment_ok and self.decrease_ok and self.constraints_ok


def tube_diagnostics(spec: RmpcSpec, traj: Trajectory, tol_tube=1e-6, tol_value=1e-5) -> TubeReport:
    """Audit a robust MPC rollout: tube containment, value decrease, constraints."""
    ctrl = RobustMpcController(spec)
    rep = TubeReport()
    cost = spec.cost
    states = traj.states
    n_steps = len(traj)
    for t in range(n_steps + 1):
        x = states[t]
        try:
            sol = ctrl.solve(x)
        except InfeasibleState:
            rep.infeasible_at = t
            break
        dist = float(np.linalg.norm(x - sol.x_bar0))
        rep.containment.append(dist)
        rep.value.append(sol.objective)
        rep.nominal_norm.append(float(np.linalg.norm(sol.x_bar0)))
        rep.stage.append(cost.stage(sol.x_bar0, sol.u_bar_seq[0]))
        rep.state_ok.append(contains(spec.X, x, FEAS_TOL))
        if t < n_steps:
            rep.input_ok.append(contains(spec.U, traj.inputs[t], FEAS_TOL))
        if dist > spec.Z.radius + tol_tube:
            rep.containment_ok = False
        if t > 0:
            gap = rep.value[t] - rep.value[t - 1] + rep.stage[t - 1]
            rep.decrease_gap.append(gap)
            if gap > tol_value:
                rep.decrease_ok = False
    if traj.failure is not None and rep.infeasible_at is None:
        rep.infeasible_at = traj.failure[0]
    rep.constraints_ok = all(rep.state_ok) and all(rep.input_ok)
    return rep
