"""Closed-loop simulation, cost accounting and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ImitMpcError, InfeasibleState, ZeroBaseline
from .numerics import LinearSystem, QuadCost
from .sets import Polytope, contains

FEAS_TOL = 1e-6


@dataclass
class Trajectory:
    states: np.ndarray           # (T+1, d_x), or shorter when truncated
    inputs: np.ndarray           # (T, d_u)
    per_step_cost: np.ndarray    # (T,)
    feasible_x: np.ndarray       # (T,) bool, x_t in X
    feasible_u: np.ndarray       # (T,) bool, u_t in U
    disturbances: np.ndarray | None = None
    failure: tuple[int, str] | None = None
    horizon: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def x0(self):
        return self.states[0]

    def __len__(self):
        return len(self.inputs)


def _as_controller(controller) -> Callable:
    """Accept ``f(x, t)``, ``f(x)`` or objects with ``__call__(x, t)``."""
    try:
        import inspect
        nparams = len(inspect.signature(controller).parameters)
    except (TypeError, ValueError):
        nparams = 2
    if nparams >= 2:
        return controller
    return lambda x, t: controller(x)


def rollout(sys: LinearSystem, controller, x0, T: int, cost: QuadCost,
            X: Polytope | None = None, U: Polytope | None = None,
            disturbance: Callable | None = None) -> Trajectory:
    """Simulate ``x+ = Ax + Bu + w`` for ``T`` steps.

    ``disturbance(t, x, u)`` returns ``w_t``. A controller exception ends the
    trajectory early; the failure is recorded, not raised.
    """
    ctrl = _as_controller(controller)
    x = np.asarray(x0, dtype=float).reshape(-1)
    states, inputs, costs, fx, fu, ws = [x], [], [], [], [], []
    failure = None
    for t in range(T):
        try:
            u = np.atleast_1d(np.asarray(ctrl(x, t), dtype=float))
        except ImitMpcError as exc:
            failure = (t, f"{type(exc).__name__}: {exc}")
            break
        w = None
        if disturbance is not None:
            w = np.asarray(disturbance(t, x, u), dtype=float)
            ws.append(w)
        inputs.append(u)
        costs.append(cost.stage(x, u))
        fx.append(True if X is None else contains(X, x, FEAS_TOL))
        fu.append(True if U is None else contains(U, u, FEAS_TOL))
        x = sys.step(x, u, w)
        states.append(x)
    du = sys.d_u
    return Trajectory(
        states=np.array(states),
        inputs=np.array(inputs).reshape(-1, du),
        per_step_cost=np.array(costs, dtype=float),
        feasible_x=np.array(fx, dtype=bool),
        feasible_u=np.array(fu, dtype=bool),
        disturbances=np.array(ws).reshape(-1, sys.d_x) if disturbance is not None else None,
        failure=failure,
        horizon=T,
    )


def dynamics_residual(sys: LinearSystem, traj: Trajectory) -> float:
    """Largest deviation of the stored states from the dynamics."""
    res = 0.0
    for t in range(len(traj)):
        w = traj.disturbances[t] if traj.disturbances is not None else None
        pred = sys.step(traj.states[t], traj.inputs[t], w)
        res = max(res, float(np.abs(pred - traj.states[t + 1]).max()))
    return res


def cost_to_go(traj: Trajectory, upto: int | None = None) -> float:
    upto = len(traj) if upto is None else upto
    if upto > len(traj):
        raise ValueError(f"trajectory has only {len(traj)} steps")
    return float(np.sum(traj.per_step_cost[:upto]))


def total_cost(traj: Trajectory, cost: QuadCost) -> float:
    """Cost over the full horizon.

    A trajectory cut short by a controller failure is completed by holding
    its last state with zero input for the remaining steps.
    """
    J = cost_to_go(traj)
    missing = traj.horizon - len(traj)
    if missing > 0:
        x_last = traj.states[len(traj)]
        J += missing * cost.stage(x_last, np.zeros(traj.inputs.shape[1]))
    return float(J)


def normalized_cost(traj_alg: Trajectory, traj_mpc: Trajectory, cost: QuadCost) -> float:
    if not np.allclose(traj_alg.x0, traj_mpc.x0):
        raise ValueError("trajectories start from different states")
    base = total_cost(traj_mpc, cost)
    if base <= 0:
        raise ZeroBaseline("expert cost is zero")
    return total_cost(traj_alg, cost) / base


def constraint_satisfaction(traj: Trajectory) -> float:
    """Fraction of the horizon with both ``x_t in X`` and ``u_t in U``.

    Steps lost to a failure count as violations.
    """
    T = max(traj.horizon, len(traj))
    if T == 0:
        return 1.0
    ok = np.logical_and(traj.feasible_x, traj.feasible_u)
    return float(np.sum(ok)) / T


def q_ref(sys: LinearSystem, cost: QuadCost, ref_controller, x, u, t: int, T: int) -> float:
    """``l(x, u)`` plus the ``(T - t - 1)``-step cost of the reference from ``Ax + Bu``."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    stage = cost.stage(x, u)
    steps = T - t - 1
    if steps <= 0:
        return stage
    x_next = sys.step(x, u)
    traj = rollout(sys, ref_controller, x_next, steps, cost)
    if traj.failure is not None:
        raise InfeasibleState(f"reference controller failed: {traj.failure[1]}", x_next)
    return stage + cost_to_go(traj)


@dataclass(frozen=True)
class MetricRow:
    algorithm: str
    budget: int
    repeat: int
    demo_count: int
    probe_count: int
    normalized_cost: float
    constraint_satisfaction_ratio: float
    tau_hat: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.constraint_satisfaction_ratio <= 1.0:
            raise ValueError("satisfaction ratio outside [0, 1]")
        if not self.normalized_cost > 0:
            raise ValueError("normalized cost must be positive")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Columns ``t, x_1..x_d, u_1..u_du, w_1..w_d, step_cost, feas_x, feas_u``."""
    dx = traj.states.shape[1]
    du = traj.inputs.shape[1]
    header = (["t"] + [f"x_{i + 1}" for i in range(dx)] + [f"u_{i + 1}" for i in range(du)]
              + [f"w_{i + 1}" for i in range(dx)] + ["step_cost", "feas_x", "feas_u"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for t in range(len(traj)):
            w = traj.disturbances[t] if traj.disturbances is not None else np.zeros(dx)
            wr.writerow([t] + [repr(float(v)) for v in traj.states[t]] + [repr(float(v)) for v in traj.inputs[t]]
                        + [repr(float(v)) for v in w]
                        + [repr(float(traj.per_step_cost[t])), int(traj.feasible_x[t]), int(traj.feasible_u[t])])
