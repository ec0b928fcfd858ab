"""Behavior Cloning, Forward training and Forward-Switch.

All three learn from an expert controller queried at chosen states. Behavior
Cloning pools the states of expert trajectories into one dataset; Forward
trains one policy per time step on states reached by the policies already
learned; Forward-Switch stops once probe rollouts all land in an LQR
invariant level set and hands over to the LQR gain from then on.
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ExpertInfeasible, ImitMpcError, InvalidInput
from .numerics import LinearSystem
from .policy import Dataset, MlpPolicy, TrainConfig, load_policy, project_onto, save_policy, train_erm
from .sets import EllipsoidLevelSet, Polytope, contains

log = logging.getLogger(__name__)


# -- sample schedule ------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def series_constant(n_terms: int = 1_000_000) -> float:
    """``sum_{t>=1} 1/(t ln^2(t+1))``: partial sum plus the tail bound ``1/ln(n_terms)``."""
    t = np.arange(1, n_terms + 1, dtype=float)
    partial = math.fsum(1.0 / (t * np.log(t + 1.0) ** 2))
    return partial + 1.0 / math.log(n_terms)


def theory_probe_count(T: int, delta: float) -> int:
    """``ceil(10 ln(T/delta) / delta)`` probe trajectories."""
    if not 0 < delta < 1:
        raise InvalidInput("delta must lie in (0, 1)")
    return math.ceil(10.0 * math.log(T / delta) / delta)


@dataclass(frozen=True)
class ScheduleParams:
    n: int
    T: int
    c: float | None = None         # None: series_constant()
    ell: int = 20
    eps: float = 0.1
    delta: float = 0.1
    mode: str = "flat"             # "flat": n_t = n; "theory": growing n_t

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInput("base sample count n must be at least 2")
        if self.T < 1:
            raise InvalidInput("horizon T must be positive")
        if self.ell < 1:
            raise InvalidInput("ell must be at least 1")
        if self.mode not in ("flat", "theory"):
            raise InvalidInput(f"unknown schedule mode {self.mode!r}")
        if self.c is None:
            object.__setattr__(self, "c", series_constant())
        if not self.c > 0:
            raise InvalidInput("series constant must be positive")


def stage_sample_size(params: ScheduleParams, t: int) -> int:
    """Expert labels used at stage ``t``."""
    if t < 0:
        raise InvalidInput("stage index must be nonnegative")
    if t == 0 or params.mode == "flat":
        return params.n
    growth = math.ceil(math.log(t + 1.0) ** 2)
    return math.ceil(params.c * params.n * t * growth) + params.n


# -- distributions and experts -----------------------------------------------------

@dataclass(frozen=True)
class InitialDistribution:
    """Uniform distribution on the box ``[lower, upper]``."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise InvalidInput("invalid box for the initial distribution")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, (n, self.dim))

    def check_support(self, feasible, rng: np.random.Generator, n: int = 20) -> None:
        """Raise ``ExpertInfeasible`` when a sampled state fails the ``feasible`` oracle."""
        corners = np.array([self.lower, self.upper, 0.5 * (self.lower + self.upper)])
        for x in np.vstack([corners, self.sample(rng, n)]):
            if not feasible(x):
                raise ExpertInfeasible("initial distribution reaches an infeasible state", state=x)


class ExpertOracle:
    """Expert queries with projection of the state onto ``X`` and a query counter.

    With ``fallback="project"`` a state inside ``X`` where the expert problem
    is infeasible is answered at its projection onto the expert's feasible
    domain (controllers expose ``project_to_domain``); ``fallback="fail"``
    raises ``ExpertInfeasible`` instead.
    """

    def __init__(self, controller, X: Polytope | None = None, fallback: str = "project"):
        if fallback not in ("project", "fail"):
            raise InvalidInput(f"unknown fallback {fallback!r}")
        self.controller = controller
        self.X = X
        self.fallback = fallback
        self.queries = 0
        self.fallbacks = 0

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if self.X is not None and self.X.is_box:
            return np.clip(x, self.X.lower, self.X.upper)
        return x

    def __call__(self, x, t=0, stage=None):
        xq = self.project(x)
        self.queries += 1
        try:
            return np.atleast_1d(np.asarray(self.controller(xq), dtype=float))
        except ImitMpcError as exc:
            project = getattr(self.controller, "project_to_domain", None)
            if self.fallback == "fail" or project is None:
                raise ExpertInfeasible(f"expert failed at stage {stage}: {exc}", state=xq, stage=stage) from exc
            first = exc
        try:
            xp = project(xq)
            u = np.atleast_1d(np.asarray(self.controller(xp), dtype=float))
        except ImitMpcError as exc:
            raise ExpertInfeasible(f"expert failed at stage {stage}: {first}; after projecting onto "
                                   f"its feasible domain: {exc}", state=xq, stage=stage) from exc
        self.fallbacks += 1
        log.debug("stage %s: expert queried at the feasible-domain projection of %s", stage, xq)
        return u

    def label(self, states, stage=None) -> np.ndarray:
        return np.array([self(x, stage=stage) for x in states])


# -- time-varying policies --------------------------------------------------------

@dataclass
class TimeVaryingPolicy:
    stages: list
    U: Polytope
    tail_time: int | None = None
    K: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    clamp_events: int = 0

    def __post_init__(self):
        if self.tail_time is not None:
            if self.K is None:
                raise InvalidInput("an LQR tail needs a gain")
            if len(self.stages) != self.tail_time:
                raise InvalidInput("with a tail, the number of stages must equal the switch time")
            self.K = np.atleast_2d(np.asarray(self.K, dtype=float))

    @property
    def has_tail(self) -> bool:
        return self.tail_time is not None

    def __call__(self, x, t=0):
        return switched_control(self, t, x)

    def batch(self, t: int, X) -> np.ndarray:
        """Controls for a batch of states at time ``t``."""
        X = np.atleast_2d(X)
        if self.has_tail and t >= self.tail_time:
            raw = X @ self.K.T
            out = project_onto(self.U, raw)
            self.clamp_events += int(np.sum(np.any(np.abs(out - raw) > 1e-12, axis=1)))
            return out
        return self._stage(t).forward(X)

    def _stage(self, t):
        if not 0 <= t < len(self.stages):
            raise InvalidInput(f"no stage policy for time {t}")
        return self.stages[t]


def switched_control(p: TimeVaryingPolicy, t: int, x) -> np.ndarray:
    """Stage policy before the switch time, clamped LQR after it."""
    x = np.asarray(x, dtype=float)
    if p.has_tail and t >= p.tail_time:
        raw = p.K @ x
        u = project_onto(p.U, raw)
        if np.any(np.abs(u - raw) > 1e-12):
            p.clamp_events += 1
        return u
    return p._stage(t).forward(x)


def roll_batch(sys: LinearSystem, policy: TimeVaryingPolicy | list, X0, steps: int) -> np.ndarray:
    """States after ``steps`` steps for every row of ``X0`` under the given stages."""
    X = np.array(X0, dtype=float)
    for t in range(steps):
        if isinstance(policy, TimeVaryingPolicy):
            U = policy.batch(t, X)
        else:
            U = policy[t].forward(X)
        X = X @ sys.A.T + np.atleast_2d(U) @ sys.B.T
    return X


# -- algorithms ---------------------------------------------------------------------

@dataclass
class StageRecord:
    t: int
    n_labels: int
    initial_states: np.ndarray
    states: np.ndarray
    labels: np.ndarray
    train_loss: float


@dataclass
class ProbeRecord:
    t: int
    states: np.ndarray
    inside: bool


def _expert_trajectory(sys: LinearSystem, expert: ExpertOracle, x0, T: int, stage=None):
    x = np.asarray(x0, dtype=float)
    xs, us = [], []
    for t in range(T):
        u = expert(x, t, stage=t if stage is None else stage)
        xs.append(x)
        us.append(u)
        x = sys.step(x, u)
    return np.array(xs), np.array(us)


def _as_oracle(expert, X):
    return expert if isinstance(expert, ExpertOracle) else ExpertOracle(expert, X)


def behavior_cloning(expert, D: InitialDistribution, n_traj: int, T: int, cfg: TrainConfig, *,
                     sys: LinearSystem, init: MlpPolicy, rng: np.random.Generator,
                     X: Polytope | None = None) -> MlpPolicy:
    """One time-invariant policy fit to all states of ``n_traj`` expert trajectories."""
    if n_traj < 1 or T < 1:
        raise InvalidInput("need at least one trajectory of at least one step")
    oracle = _as_oracle(expert, X)
    X0 = D.sample(rng, n_traj)
    parts = []
    for x0 in X0:
        xs, us = _expert_trajectory(sys, oracle, x0, T)
        parts.append(Dataset(xs, us))
    data = Dataset.concat(parts)
    pol = train_erm(data, cfg, init)
    pol.meta.update(algorithm="bc", demo_count=len(data), n_traj=n_traj, T=T)
    return pol


def behavior_cloning_with_tail(expert, D: InitialDistribution, n_traj: int, tau: int, cfg: TrainConfig,
                               K, *, sys: LinearSystem, init: MlpPolicy, rng: np.random.Generator,
                               X: Polytope | None = None) -> TimeVaryingPolicy:
    """Behavior Cloning on trajectories of length ``tau``, then the LQR gain."""
    pol = behavior_cloning(expert, D, n_traj, tau, cfg, sys=sys, init=init, rng=rng, X=X)
    return TimeVaryingPolicy([pol] * tau, pol.U, tail_time=tau, K=K,
                             meta=dict(algorithm="bc_tail", demo_count=n_traj * tau, probe_count=0,
                                       tau_hat=tau))


def _train_stage(t, oracle, sys, D, params, cfg, stages, prev, init, rng, warm_start):
    n_t = stage_sample_size(params, t)
    X0 = D.sample(rng, n_t)
    states = roll_batch(sys, stages, X0, t)
    labels = oracle.label(states, stage=t)
    start = prev if (warm_start and prev is not None) else init
    pol = train_erm(Dataset(states, labels), replace(cfg, seed=cfg.seed + t), start)
    rec = StageRecord(t, n_t, X0, states, labels, pol.meta["final_loss"])
    log.debug("stage %d: %d labels, training loss %.4g", t, n_t, rec.train_loss)
    return pol, rec


def forward_train(expert, D: InitialDistribution, params: ScheduleParams, cfg: TrainConfig, *,
                  sys: LinearSystem, init: MlpPolicy, rng: np.random.Generator,
                  X: Polytope | None = None, warm_start: bool = True) -> TimeVaryingPolicy:
    """One policy per time step, each trained on states its predecessors reach."""
    oracle = _as_oracle(expert, X)
    stages, records = [], []
    prev = None
    for t in range(params.T):
        prev, rec = _train_stage(t, oracle, sys, D, params, cfg, stages, prev, init, rng, warm_start)
        stages.append(prev)
        records.append(rec)
    demo = sum(r.n_labels for r in records)
    return TimeVaryingPolicy(stages, init.U, meta=dict(algorithm="forward", demo_count=demo, probe_count=0,
                                                       tau_hat=params.T, records=records,
                                                       schedule=asdict(params)))


def forward_switch(expert, D: InitialDistribution, params: ScheduleParams, cfg: TrainConfig,
                   O_test: EllipsoidLevelSet, K, *, sys: LinearSystem, init: MlpPolicy,
                   rng: np.random.Generator, X: Polytope | None = None,
                   warm_start: bool = True) -> TimeVaryingPolicy:
    """Forward training until ``ell`` fresh probe rollouts all end inside ``O_test``.

    After stage ``t - 1`` the probes are rolled ``t`` steps; if every probe
    state lies in ``O_test`` the switch time is ``t`` and the LQR gain takes
    over. Without a switch the result is the plain Forward policy.
    """
    oracle = _as_oracle(expert, X)
    stages, records, probes = [], [], []
    prev = None
    tau = None
    for t in range(params.T):
        prev, rec = _train_stage(t, oracle, sys, D, params, cfg, stages, prev, init, rng, warm_start)
        stages.append(prev)
        records.append(rec)
        if t + 1 >= params.T:
            break
        P0 = D.sample(rng, params.ell)
        Xp = roll_batch(sys, stages, P0, t + 1)
        inside = all(contains(O_test, x, 0.0) for x in Xp)
        probes.append(ProbeRecord(t + 1, Xp, inside))
        if inside:
            tau = t + 1
            break
    demo = sum(r.n_labels for r in records)
    meta = dict(algorithm="forward_switch", demo_count=demo, probe_count=params.ell * len(probes),
                tau_hat=tau if tau is not None else params.T, records=records, probes=probes,
                schedule=asdict(params))
    if tau is None:
        return TimeVaryingPolicy(stages, init.U, meta=meta)
    return TimeVaryingPolicy(stages, init.U, tail_time=tau, K=K, meta=meta)


# -- serialization -------------------------------------------------------------------

def save_time_varying(policy: TimeVaryingPolicy, directory) -> None:
    """One policy file per stage plus ``manifest.txt`` (key = value lines)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, pol in enumerate(policy.stages):
        save_policy(pol, d / f"stage_{t:03d}.timlp")
    meta = policy.meta
    lines = {
        "n_stages": len(policy.stages),
        "tail_time": "none" if policy.tail_time is None else policy.tail_time,
        "K": json.dumps(policy.K.tolist()) if policy.K is not None else "none",
        "algorithm": meta.get("algorithm", "unknown"),
        "demo_count": meta.get("demo_count", 0),
        "probe_count": meta.get("probe_count", 0),
        "tau_hat": meta.get("tau_hat", len(policy.stages)),
        "schedule": json.dumps(meta.get("schedule", {}), sort_keys=True),
        "seeds": json.dumps([p.seed for p in policy.stages]),
    }
    with open(d / "manifest.txt", "w") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {v}\n")


def load_time_varying(directory) -> TimeVaryingPolicy:
    d = Path(directory)
    fields = {}
    with open(d / "manifest.txt") as fh:
        for line in fh:
            if line.strip():
                k, v = line.split("=", 1)
                fields[k.strip()] = v.strip()
    n = int(fields["n_stages"])
    stages = [load_policy(d / f"stage_{t:03d}.timlp") for t in range(n)]
    tail = None if fields["tail_time"] == "none" else int(fields["tail_time"])
    K = None if fields["K"] == "none" else np.array(json.loads(fields["K"]))
    meta = dict(algorithm=fields["algorithm"], demo_count=int(fields["demo_count"]),
                probe_count=int(fields["probe_count"]), tau_hat=int(fields["tau_hat"]),
                schedule=json.loads(fields["schedule"]))
    return TimeVaryingPolicy(stages, stages[0].U, tail_time=tail, K=K, meta=meta)
