"""Command-line entry point: ``imitmpc {bench,train,eval,plot,sysinfo}``.

Exit codes: 0 success, 2 configuration error, 3 expert infeasibility,
4 input/output error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import (ConfigError, DegenerateLevel, EmptyTightenedSet, ExpertInfeasible, InfeasibleState,
                      InvalidInput, UnknownDimension)
from ..imitation import TimeVaryingPolicy, load_time_varying, save_time_varying
from ..numerics import spectral_radius, stability_envelope
from ..sets import max_positive_invariant
from .config import ExperimentConfig, keys_help, load_config
from .experiment import aggregate, build_setup, evaluate, expert_baselines, run_experiment, train_algorithm
from .outputs import emit_outputs, plot_metric, read_metrics, write_summary

EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 2, 3, 4

log = logging.getLogger("imitmpc")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "expert", None):
        changes["expert"] = args.expert
    if getattr(args, "terminal_set", None):
        changes["terminal"] = args.terminal_set
    if getattr(args, "outdir", None):
        changes["outdir"] = args.outdir
    if not args.config and args.set:
        from .config import parse_overrides
        changes.update(parse_overrides(((f"--set #{i + 1}", o) for i, o in enumerate(args.set))))
    return cfg.updated(**changes) if changes else cfg


def cmd_bench(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg)
    files = emit_outputs(res.rows, res.manifest, cfg.outdir, res.summary, res.samples)
    for s in res.summary:
        print(f"{s.algorithm:>15} budget {s.budget:>5}: cost {s.mean_cost:.4g} +/- {s.ci_cost:.2g}, "
              f"satisfaction {s.mean_satisfaction:.3f}, demos {s.mean_demo_count:.0f}, tau {s.mean_tau_hat:.1f}")
    print("wrote " + ", ".join(str(f) for f in files))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    setup = build_setup(cfg)
    ss = np.random.SeedSequence([cfg.seed, args.budget, args.repeat])
    rng = np.random.default_rng(ss)
    init_seed = int(ss.generate_state(1)[0])
    tau = None
    if args.algorithm == "bc_tail":
        if args.tau is None:
            raise ConfigError("bc_tail needs --tau")
        tau = args.tau
    pol, meta = train_algorithm(setup, args.algorithm, args.budget, rng, init_seed, tau_hat=tau)
    if not isinstance(pol, TimeVaryingPolicy):
        pol = TimeVaryingPolicy([pol] * cfg.T, setup.U, meta=dict(algorithm=args.algorithm, **meta))
    save_time_varying(pol, args.out)
    print(f"saved {args.algorithm} policy to {args.out}: demos {meta['demo_count']}, "
          f"probes {meta['probe_count']}, tau_hat {meta['tau_hat']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    setup = build_setup(cfg)
    pol = load_time_varying(args.policy)
    if pol.has_tail:
        pol.K = setup.K
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10_007]))
    X0 = setup.D.sample(rng, args.test_states or cfg.test_states)
    baselines = expert_baselines(setup, X0)
    cost, sat, _ = evaluate(setup, pol, X0, baselines)
    print(f"normalized_cost = {cost!r}")
    print(f"constraint_satisfaction_ratio = {sat!r}")
    return 0


def cmd_plot(args) -> int:
    rows = read_metrics(args.metrics)
    if not rows:
        raise ConfigError(f"{args.metrics} has no rows")
    summary = aggregate(rows)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(summary, out / "summary.csv")
    plot_metric(summary, out / "cost_vs_budget.svg", "cost")
    plot_metric(summary, out / "satisfaction_vs_budget.svg", "satisfaction")
    print(f"wrote plots to {out}")
    return 0


def cmd_sysinfo(args) -> int:
    cfg = _config(args)
    setup = build_setup(cfg)
    lqr = setup.nominal.lqr
    env = stability_envelope(lqr.A_K)
    np.set_printoptions(precision=6, suppress=True)
    print(f"d = {setup.sys.d_x}, source = {cfg.source}")
    print(f"A =\n{setup.sys.A}")
    print(f"K = {lqr.K.ravel()}")
    print(f"riccati residual = {lqr.riccati_residual:.3e}, iterations = {lqr.iterations}")
    print(f"spectral radius of A+BK = {spectral_radius(lqr.A_K):.6f}")
    print(f"envelope: tau = {env.tau:.6f}, rho = {env.rho:.6f}, kappa = {env.kappa:.6f}")
    inv = max_positive_invariant(lqr.A_K, setup.X, setup.U, lqr.K)
    print(f"maximal invariant set: {inv.O_inf.G.shape[0]} rows, {inv.iterations} iterations, "
          f"converged = {inv.converged}")
    if setup.robust is not None:
        rs = setup.robust
        print(f"eps = {cfg.eps}: tube ball radius = {rs.Z.radius:.6f}, "
              f"tube zonotope generators = {rs.tube.n_generators}")
        Ub = rs.base.U
        print(f"tightened U = [{Ub.lower.ravel()}, {Ub.upper.ravel()}]" if Ub.is_box else f"tightened U: G u <= {Ub.h}")
    print(f"switch level set: x'Px <= {setup.O_test.c:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imitmpc", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys_help())
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--expert", choices=["robust", "nominal"], help="expert controller")
        sp.add_argument("--terminal-set", choices=["polytope", "levelset"], help="impose a terminal set")

    sp = sub.add_parser("bench", help="run the configured sweep and write CSV/SVG outputs")
    common(sp)
    sp.add_argument("--outdir", help="output directory (overrides the config)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train", help="train one algorithm and save the policy directory")
    common(sp)
    sp.add_argument("--algorithm", required=True, choices=["bc", "forward", "forward_switch", "bc_tail"])
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--repeat", type=int, default=0)
    sp.add_argument("--tau", type=int, help="switch time for bc_tail")
    sp.add_argument("--out", required=True, help="policy directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved policy against the expert")
    common(sp)
    sp.add_argument("--policy", required=True, help="policy directory")
    sp.add_argument("--test-states", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="redraw figures from a metrics CSV")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("sysinfo", help="print LQR and invariant-set diagnostics")
    common(sp)
    sp.set_defaults(func=cmd_sysinfo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInput, UnknownDimension, EmptyTightenedSet, DegenerateLevel) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExpertInfeasible, InfeasibleState) as exc:
        state = getattr(exc, "state", None)
        stage = getattr(exc, "stage", None)
        print(f"expert infeasible: {exc}", file=sys.stderr)
        if state is not None:
            print(f"  state = {np.asarray(state).tolist()}, stage = {stage}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
