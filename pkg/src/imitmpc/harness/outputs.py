"""CSV tables, manifest and SVG figures for an experiment run."""

from __future__ import annotations

import csv
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..sim import MetricRow

METRIC_HEADER = [f.name for f in fields(MetricRow)]
SUMMARY_HEADER = ["algorithm", "budget", "repeats", "mean_cost", "ci_cost", "mean_satisfaction",
                  "ci_satisfaction", "mean_demo_count", "mean_tau_hat"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_HEADER)
        for r in rows:
            wr.writerow([_fmt(getattr(r, k)) for k in METRIC_HEADER])


def read_metrics(path) -> list[MetricRow]:
    types = {f.name: f.type for f in fields(MetricRow)}
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for k, v in rec.items():
                t = types[k]
                kw[k] = float(v) if t in (float, "float") else int(v) if t in (int, "int") else v
            out.append(MetricRow(**kw))
    return out


def write_summary(summary, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_HEADER)
        for s in summary:
            wr.writerow([_fmt(getattr(s, k)) for k in SUMMARY_HEADER])


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "imitmpc"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_metric(summary, path, metric: str = "cost") -> None:
    """One series per algorithm with 95% error bars against the demonstration budget."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    algs = list(dict.fromkeys(s.algorithm for s in summary))
    for alg in algs:
        sel = sorted((s for s in summary if s.algorithm == alg), key=lambda s: s.budget)
        x = [s.mean_demo_count for s in sel]
        if metric == "cost":
            y, e = [s.mean_cost for s in sel], [s.ci_cost for s in sel]
        else:
            y, e = [s.mean_satisfaction for s in sel], [s.ci_satisfaction for s in sel]
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=alg)
    ax.set_xlabel("expert demonstrations")
    if metric == "cost":
        ax.set_ylabel("normalized cost")
        ax.set_yscale("log")
    else:
        ax.set_ylabel("constraint satisfaction ratio")
        ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_trajectories(samples: dict, path) -> None:
    """First two state coordinates of one test trajectory per controller."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, states in samples.items():
        states = np.asarray(states)
        ax.plot(states[:, 0], states[:, 1], marker=".", label=name)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def emit_outputs(rows, manifest, outdir, summary=None, samples=None) -> list[Path]:
    """Write ``metrics.csv``, ``summary.csv``, ``manifest.txt`` and the SVG figures."""
    if not rows:
        raise ValueError("no metric rows to write")
    from .experiment import aggregate
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summary if summary is not None else aggregate(rows)
    written = [out / "metrics.csv", out / "summary.csv", out / "manifest.txt",
               out / "cost_vs_budget.svg", out / "satisfaction_vs_budget.svg"]
    write_metrics(rows, written[0])
    write_summary(summary, written[1])
    written[2].write_text(manifest.to_text())
    plot_metric(summary, written[3], "cost")
    plot_metric(summary, written[4], "satisfaction")
    if samples:
        written.append(out / "trajectories.svg")
        plot_trajectories(samples, written[-1])
    return written
