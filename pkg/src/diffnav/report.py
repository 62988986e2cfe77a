"""Delimited summary tables and static matplotlib figures.

Everything renders to files; nothing opens a window. Figures cover success
bars across agent counts, ablation grids, training loss curves, and
executed trajectories over the arena.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .executor import EpisodeResult, EvalSummary
from .sim import AGENT_COLORS, ScenarioSpec

SUMMARY_FIELDS = [
    "scenario_id", "n_agents", "episodes", "success_rate", "success_sem",
    "mean_pair_collisions", "mean_obstacle_collisions",
    "mean_sample_seconds", "mean_steps",
]


def write_summary_csv(summaries: list[EvalSummary], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for summary in summaries:
            writer.writerow(summary.as_row())
    return path


def write_grid_csv(grid: dict[str, dict[str, float]], path: str | Path) -> Path:
    """Variant-by-count success table, one variant per row."""
    path = Path(path)
    counts = sorted({int(n) for row in grid.values() for n in row})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + [str(n) for n in counts])
        for variant in sorted(grid):
            row = grid[variant]
            writer.writerow([variant] + [row.get(str(n), "") for n in counts])
    return path


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_success_bars(summaries: list[EvalSummary], path: str | Path,
                      title: str = "Success rate by agent count") -> Path:
    path = Path(path)
    counts = [s.n_agents for s in summaries]
    rates = [s.success_rate for s in summaries]
    sems = [s.success_sem for s in summaries]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(range(len(counts)), rates, yerr=sems, capsize=3, color="#4878a8")
    ax.set_xticks(range(len(counts)))
    ax.set_xticklabels([str(n) for n in counts])
    ax.set_xlabel("agents")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_grid_bars(grid: dict[str, dict[str, float]], path: str | Path,
                   title: str = "Ablation success by deployment count") -> Path:
    path = Path(path)
    counts = sorted({int(n) for row in grid.values() for n in row})
    variants = sorted(grid)
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    for i, variant in enumerate(variants):
        values = [grid[variant].get(str(n), np.nan) for n in counts]
        offsets = np.arange(len(counts)) + (i - (len(variants) - 1) / 2) * width
        ax.bar(offsets, values, width=width, label=variant)
    ax.set_xticks(np.arange(len(counts)))
    ax.set_xticklabels([str(n) for n in counts])
    ax.set_xlabel("agents at deployment")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_loss_curves(metrics_by_name: dict[str, str | Path], path: str | Path,
                     term: str = "loss_total") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for name, metrics_path in sorted(metrics_by_name.items()):
        records = read_metrics(metrics_path)
        epochs = [r["epoch"] for r in records]
        values = [r[term] for r in records]
        ax.plot(epochs, values, label=name, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(term.replace("loss_", "") + " loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_trajectory(result: EpisodeResult, spec: ScenarioSpec,
                    goals: np.ndarray, path: str | Path) -> Path:
    """Draw executed paths, start markers, goal rings, and obstacles."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    for circ in spec.circles:
        ax.add_patch(plt.Circle(circ.center, circ.radius, color="0.55"))
    for rect in spec.rects:
        lo = np.asarray(rect.center) - np.asarray(rect.half_extents)
        ax.add_patch(plt.Rectangle(lo, 2 * rect.half_extents[0],
                                   2 * rect.half_extents[1], color="0.55"))
    traj = result.trajectory
    for i in range(traj.shape[1]):
        color = AGENT_COLORS[i % len(AGENT_COLORS)] / 255.0
        ax.plot(traj[:, i, 0], traj[:, i, 1], color=color, linewidth=1.0)
        ax.plot(traj[0, i, 0], traj[0, i, 1], "o", color=color, markersize=4)
        ax.add_patch(plt.Circle(goals[i], spec.goal_tolerance, fill=False,
                                color=color, linewidth=1.0))
    ax.set_xlim(-spec.arena, spec.arena)
    ax.set_ylim(-spec.arena, spec.arena)
    ax.set_aspect("equal")
    ax.set_title(f"{traj.shape[1]} agents, "
                 f"{'success' if result.success else 'failure'} in {result.steps} steps")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
