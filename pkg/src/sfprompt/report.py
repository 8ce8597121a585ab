"""CSV metric sinks and the matplotlib figures rendered next to them.

Numeric fields are written at 17 significant digits so every float round-trips
losslessly; every file carries a header row.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .costmodel import CostTriple, SweepRow
from .server import RoundReport, SimulationResult

ROUNDS_COLUMNS = [
    "round", "selected_clients", "pruned_sizes", "mean_local_loss",
    "test_accuracy", "bytes_up", "bytes_down", "latency_s",
]

SUMMARY_COLUMNS = [
    "final_accuracy", "initial_accuracy", "rounds",
    "total_bytes_up", "total_bytes_down", "total_latency_s",
]

COSTS_COLUMNS = ["method", "compute", "comm", "latency"]

SWEEP_COLUMNS = ["method", "axis_value", "compute", "comm", "latency"]


def _f(x: float) -> str:
    return format(float(x), ".17g")


def write_rounds_csv(path, reports: list[RoundReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROUNDS_COLUMNS)
        for r in reports:
            w.writerow([
                r.round,
                ";".join(str(c) for c in r.selected),
                ";".join(str(s) for s in r.pruned_sizes),
                _f(r.mean_local_loss),
                _f(r.test_accuracy),
                r.bytes_up,
                r.bytes_down,
                _f(r.latency_s),
            ])


def write_summary_csv(path, result: SimulationResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([
            _f(result.final_accuracy),
            _f(result.initial_accuracy),
            len(result.reports),
            sum(r.bytes_up for r in result.reports),
            sum(r.bytes_down for r in result.reports),
            _f(sum(r.latency_s for r in result.reports)),
        ])


def write_costs_csv(path, triples: dict[str, CostTriple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COSTS_COLUMNS)
        for method, tr in triples.items():
            w.writerow([method, _f(tr.compute_per_client), _f(tr.comm_total), _f(tr.latency)])


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([row.method, _f(row.axis_value), _f(row.compute), _f(row.comm), _f(row.latency)])


def render_rounds_figure(path, reports: list[RoundReport]) -> None:
    """Accuracy, local loss, traffic, and latency per round on a 2x2 grid."""
    if not reports:
        return
    rounds = [r.round for r in reports]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    axes[0, 0].plot(rounds, [r.test_accuracy for r in reports], marker="o", ms=3)
    axes[0, 0].set_xlabel("round")
    axes[0, 0].set_ylabel("test accuracy")
    axes[0, 0].set_ylim(0, 1)
    axes[0, 1].plot(rounds, [r.mean_local_loss for r in reports], marker="o", ms=3, color="tab:orange")
    axes[0, 1].set_xlabel("round")
    axes[0, 1].set_ylabel("mean local loss")
    axes[1, 0].plot(rounds, [r.bytes_up for r in reports], label="up")
    axes[1, 0].plot(rounds, [r.bytes_down for r in reports], label="down")
    axes[1, 0].set_xlabel("round")
    axes[1, 0].set_ylabel("payload bytes")
    axes[1, 0].legend()
    axes[1, 1].plot(rounds, [r.latency_s for r in reports], color="tab:green")
    axes[1, 1].set_xlabel("round")
    axes[1, 1].set_ylabel("simulated latency [s]")
    for ax in axes.flat:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep_figure(path, rows: list[SweepRow]) -> None:
    """Per-round communication for each method along the sweep axis."""
    if not rows:
        return
    axis = rows[0].axis
    fig, ax = plt.subplots(figsize=(7, 5))
    for method in ("fl", "sfl", "sfprompt"):
        pts = [(r.axis_value, r.comm) for r in rows if r.method == method]
        if pts:
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, marker="o", ms=4, label=method)
    ax.set_xlabel(axis)
    ax.set_ylabel("communication cost")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_outputs(out_dir, result: SimulationResult, triples: dict[str, CostTriple]) -> list[Path]:
    """The full report bundle for one simulation run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rounds_csv(out / "rounds.csv", result.reports)
    write_summary_csv(out / "summary.csv", result)
    write_costs_csv(out / "costs.csv", triples)
    written = [out / "rounds.csv", out / "summary.csv", out / "costs.csv"]
    if result.reports:
        render_rounds_figure(out / "rounds.png", result.reports)
        written.append(out / "rounds.png")
    return written
