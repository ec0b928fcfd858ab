"""Training and evaluation sweeps over algorithms, budgets and repeats."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..errors import ExpertInfeasible
from ..imitation import (ExpertOracle, InitialDistribution, ScheduleParams, behavior_cloning,
                         behavior_cloning_with_tail, forward_switch, forward_train, theory_probe_count)
from ..mpc import MpcController, MpcSpec, TerminalMode, make_mpc_spec
from ..numerics import LinearSystem, QuadCost
from ..policy import MlpPolicy, TrainConfig
from ..rmpc import RmpcSpec, RobustMpcController, make_rmpc_spec
from ..sets import EllipsoidLevelSet, Polytope, lqr_levelset
from ..sim import MetricRow, constraint_satisfaction, normalized_cost, rollout
from .config import ExperimentConfig
from .systems import make_benchmark_system

log = logging.getLogger(__name__)


@dataclass
class Setup:
    cfg: ExperimentConfig
    sys: LinearSystem
    X: Polytope
    U: Polytope
    D: InitialDistribution
    cost: QuadCost
    nominal: MpcSpec
    robust: RmpcSpec | None
    O_test: EllipsoidLevelSet

    @property
    def K(self):
        return self.nominal.K

    def expert_controller(self):
        """Fresh (warm-start free) expert controller."""
        if self.robust is not None:
            return RobustMpcController(self.robust)
        return MpcController(self.nominal)

    def expert(self) -> ExpertOracle:
        return ExpertOracle(self.expert_controller(), self.X)


def build_setup(cfg: ExperimentConfig) -> Setup:
    sys, X, U, D = make_benchmark_system(cfg.d, cfg.source, cfg.system_seed, cfg.x_bound, cfg.u_bound,
                                         (cfg.init_lower, cfg.init_upper))
    Q = cfg.q * np.eye(sys.d_x)
    R = cfg.r * np.eye(sys.d_u)
    mode = TerminalMode.LQR_COST if cfg.terminal == "none" else TerminalMode.LQR_COST_AND_SET
    kind = "polytope" if cfg.terminal == "none" else cfg.terminal
    nominal = make_mpc_spec(sys, Q, R, cfg.N, X, U, mode, terminal_set=kind)
    robust = None
    if cfg.expert == "robust":
        robust = make_rmpc_spec(nominal, cfg.eps, terminal_set=kind if mode is not TerminalMode.LQR_COST else None)
        O_test = lqr_levelset(nominal.lqr.P, nominal.K, robust.base.X, robust.base.U)
    else:
        O_test = lqr_levelset(nominal.lqr.P, nominal.K, X, U)
    return Setup(cfg, sys, X, U, D, nominal.cost, nominal, robust, O_test)


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                       batch_size=cfg.batch_size or None, seed=seed, loss=cfg.loss)


def cell_seed(cfg: ExperimentConfig, budget_index: int, repeat: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, budget_index, repeat]).generate_state(1)[0])


@dataclass
class CellResult:
    index: int
    rows: list
    samples: dict          # algorithm -> states of the first test trajectory
    seconds: float
    seed: int


def train_algorithm(setup: Setup, algorithm: str, budget: int, rng: np.random.Generator, init_seed: int,
                    tau_hat: int | None = None, expert: ExpertOracle | None = None):
    """Train one algorithm at one budget; returns a controller ``f(x, t)`` and its metadata."""
    cfg = setup.cfg
    expert = expert or setup.expert()
    init = MlpPolicy.init(setup.sys.d_x, setup.sys.d_u, setup.U, hidden=cfg.hidden, seed=init_seed)
    tcfg = train_config(cfg, init_seed)
    T = cfg.T
    if algorithm == "bc":
        n_traj = max(1, budget // T)
        pol = behavior_cloning(expert, setup.D, n_traj, T, tcfg, sys=setup.sys, init=init, rng=rng)
        meta = dict(demo_count=n_traj * T, probe_count=0, tau_hat=T)
        return pol, meta
    n = max(2, budget // T)
    params = ScheduleParams(n=n, T=T, ell=cfg.ell, eps=cfg.eps, delta=cfg.delta, mode=cfg.schedule)
    if algorithm == "forward":
        pol = forward_train(expert, setup.D, params, tcfg, sys=setup.sys, init=init, rng=rng,
                            warm_start=cfg.warm_start)
    elif algorithm == "forward_switch":
        pol = forward_switch(expert, setup.D, params, tcfg, setup.O_test, setup.K, sys=setup.sys, init=init,
                             rng=rng, warm_start=cfg.warm_start)
    elif algorithm == "bc_tail":
        if tau_hat is None:
            raise ValueError("bc_tail needs the switch time of forward_switch")
        pol = behavior_cloning_with_tail(expert, setup.D, n, tau_hat, tcfg, setup.K, sys=setup.sys,
                                         init=init, rng=rng)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    meta = {k: pol.meta[k] for k in ("demo_count", "probe_count", "tau_hat")}
    return pol, meta


def expert_baselines(setup: Setup, X0):
    """Expert closed-loop trajectories from every test state (fails fast, no domain fallback)."""
    out = []
    for x0 in X0:
        expert = ExpertOracle(setup.expert_controller(), setup.X, fallback="fail")
        traj = rollout(setup.sys, expert, x0, setup.cfg.T, setup.cost, setup.X, setup.U)
        if traj.failure is not None:
            raise ExpertInfeasible(f"expert failed on a test trajectory: {traj.failure[1]}",
                                   state=traj.states[-1], stage=traj.failure[0])
        out.append(traj)
    return out


def evaluate(setup: Setup, controller, X0, baselines):
    """Mean normalized cost, mean satisfaction ratio and the trajectories."""
    ratios, sats, trajs = [], [], []
    for x0, base in zip(X0, baselines):
        traj = rollout(setup.sys, controller, x0, setup.cfg.T, setup.cost, setup.X, setup.U)
        ratios.append(normalized_cost(traj, base, setup.cost))
        sats.append(constraint_satisfaction(traj))
        trajs.append(traj)
    return float(np.mean(ratios)), float(np.mean(sats)), trajs


def _cell_streams(cfg: ExperimentConfig, budget_index: int, repeat: int):
    seed = cell_seed(cfg, budget_index, repeat)
    test_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return seed, test_ss, train_ss


def cell_test_states(setup: Setup, budget_index: int, repeat: int) -> np.ndarray:
    """Test initial states of one cell, reproducible from the root seed."""
    _, test_ss, _ = _cell_streams(setup.cfg, budget_index, repeat)
    return setup.D.sample(np.random.default_rng(test_ss), setup.cfg.test_states)


def run_cell(setup: Setup, budget_index: int, repeat: int) -> CellResult:
    cfg = setup.cfg
    budget = cfg.budgets[budget_index]
    seed, _, train_ss = _cell_streams(cfg, budget_index, repeat)
    t0 = time.perf_counter()
    X0 = cell_test_states(setup, budget_index, repeat)
    baselines = expert_baselines(setup, X0)
    samples = {"expert": baselines[0].states}
    rows = []
    tau_switch = None
    order = sorted(cfg.algorithms, key=lambda a: a == "bc_tail")
    algo_ss = train_ss.spawn(len(order))
    for algorithm, a_ss in zip(order, algo_ss):
        rng = np.random.default_rng(a_ss)
        init_seed = int(a_ss.generate_state(1)[0])
        pol, meta = train_algorithm(setup, algorithm, budget, rng, init_seed, tau_hat=tau_switch)
        if algorithm == "forward_switch":
            tau_switch = meta["tau_hat"]
        cost, sat, trajs = evaluate(setup, pol, X0, baselines)
        samples[algorithm] = trajs[0].states
        rows.append(MetricRow(algorithm=algorithm, budget=budget, repeat=repeat, demo_count=meta["demo_count"],
                              probe_count=meta["probe_count"], normalized_cost=cost,
                              constraint_satisfaction_ratio=sat, tau_hat=meta["tau_hat"], seed=seed))
        log.info("budget %d repeat %d %s: cost %.4g, satisfaction %.3f, demos %d", budget, repeat, algorithm,
                 cost, sat, meta["demo_count"])
    rows.sort(key=lambda r: cfg.algorithms.index(r.algorithm))
    index = budget_index * cfg.repeats + repeat
    return CellResult(index, rows, samples, time.perf_counter() - t0, seed)


def _run_cell_args(args):
    setup, bi, r = args
    return run_cell(setup, bi, r)


@dataclass
class SummaryRow:
    algorithm: str
    budget: int
    repeats: int
    mean_cost: float
    ci_cost: float
    mean_satisfaction: float
    ci_satisfaction: float
    mean_demo_count: float
    mean_tau_hat: float


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * SE`` (zero for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def aggregate(rows) -> list[SummaryRow]:
    out = []
    keys = []
    for r in rows:
        if (r.algorithm, r.budget) not in keys:
            keys.append((r.algorithm, r.budget))
    for alg, b in keys:
        sel = [r for r in rows if r.algorithm == alg and r.budget == b]
        mc, cc = mean_ci([r.normalized_cost for r in sel])
        ms, cs = mean_ci([r.constraint_satisfaction_ratio for r in sel])
        out.append(SummaryRow(alg, b, len(sel), mc, cc, ms, cs,
                              float(np.mean([r.demo_count for r in sel])),
                              float(np.mean([r.tau_hat for r in sel]))))
    return out


@dataclass
class RunManifest:
    config_text: str
    digest: str
    cell_seeds: list               # (budget, repeat, seed)
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"# run manifest", f"digest = {self.digest}"]
        lines += [f"version_{k} = {v}" for k, v in sorted(self.versions.items())]
        lines.append("[config]")
        lines.append(self.config_text.rstrip("\n"))
        lines.append("[cells]")
        lines += [f"budget={b} repeat={r} seed={s}" for b, r, s in self.cell_seeds]
        lines.append("[timings]")
        lines += [f"{k} = {v:.3f}" for k, v in self.timings.items()]
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    rows: list
    summary: list
    manifest: RunManifest
    samples: dict


def run_experiment(cfg: ExperimentConfig, setup: Setup | None = None) -> ExperimentResult:
    """Every (budget, repeat) cell, ordered by cell index whatever the worker count."""
    t0 = time.perf_counter()
    setup = setup or build_setup(cfg)
    if "forward_switch" in cfg.algorithms:
        ell_theory = theory_probe_count(cfg.T, cfg.delta)
        if cfg.ell < ell_theory:
            log.warning("switch test uses ell = %d probe trajectories; the confidence bound for delta = %g "
                        "asks for %d", cfg.ell, cfg.delta, ell_theory)
    cells = [(bi, r) for bi in range(len(cfg.budgets)) for r in range(cfg.repeats)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell_args, [(setup, bi, r) for bi, r in cells]))
    else:
        results = [run_cell(setup, bi, r) for bi, r in cells]
    results.sort(key=lambda c: c.index)
    rows = [row for c in results for row in c.rows]
    timings = {f"cell_{c.index}": c.seconds for c in results}
    timings["total"] = time.perf_counter() - t0
    manifest = RunManifest(cfg.to_text(), cfg.digest(),
                           [(cfg.budgets[bi], r, c.seed) for (bi, r), c in zip(cells, results)],
                           timings, {"imitmpc": __version__, "numpy": np.__version__})
    samples = results[-1].samples if results else {}
    return ExperimentResult(rows, aggregate(rows), manifest, samples)
