"""``diffnav`` command line: dataset generation, training, evaluation,
upscaling sweeps, dynamic-roster demos, ablations, and replotting.

Every subcommand reads an optional YAML config plus dotted ``--set``
overrides, writes its tables/figures under ``--out``, and exits nonzero
with a message on stderr when anything fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from . import report
from .config import (ExecConfig, RunConfig, apply_overrides, load_run_config,
                     save_run_config, to_dict)
from .diffusion import load_checkpoint, train
from .executor import Planner, RosterChange, evaluate, run_episode, \
    run_episode_dynamic, upscale_sweep
from .expert import collect_dataset
from .sim import ScenarioSpec, make_scenario


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _scenario(args) -> ScenarioSpec:
    if getattr(args, "scenario_file", None):
        return ScenarioSpec.load(args.scenario_file)
    spec = make_scenario(args.scenario, seed=getattr(args, "scenario_seed", 0))
    if getattr(args, "max_steps", None):
        spec.max_steps = args.max_steps
    return spec


def _parse_counts(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def cmd_gen_data(args) -> int:
    spec = _scenario(args)
    out = Path(args.out)
    manifest = collect_dataset(
        spec, out,
        agent_counts=_parse_counts(args.agents),
        episodes_per_count=args.episodes_per_count,
        seed=args.seed,
        frame_resolution=args.frame_resolution,
    )
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    result = train(args.data, cfg, out, log_every=args.log_every)
    save_run_config(cfg, out / "config.yaml")
    report.plot_loss_curves({"train": result.metrics_path}, out / "loss_curves.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    print(f"final:      {json.dumps(result.final_losses)}")
    return 0


def _make_planner(args) -> Planner:
    payload = load_checkpoint(args.checkpoint)
    cfg = payload["run_config"]
    exec_cfg = ExecConfig(
        horizon=cfg.model.horizon,
        stride=args.stride or cfg.model.horizon,
        kp=cfg.exec.kp, kd=cfg.exec.kd, seed=args.seed,
    )
    return Planner(payload, exec_cfg)


def cmd_eval(args) -> int:
    planner = _make_planner(args)
    spec = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for n in _parse_counts(args.agents):
        summary = evaluate(spec, planner, n, args.episodes, args.seed)
        summaries.append(summary)
        print(f"n={n}: success {summary.success_rate:.2f} "
              f"+/- {summary.success_sem:.3f}, "
              f"collisions/ep {summary.mean_pair_collisions:.2f}, "
              f"sample {summary.mean_sample_seconds * 1e3:.1f} ms/window")
    table = report.write_summary_csv(summaries, out / "eval_summary.csv")
    figure = report.plot_success_bars(summaries, out / "eval_success.png")
    example = run_episode(spec, summaries[-1].n_agents, planner, seed=args.seed)
    from .sim import reset

    goals = reset(spec, summaries[-1].n_agents, args.seed).goals
    report.plot_trajectory(example, spec, goals, out / "eval_trajectory.png")
    print(f"wrote {table} and {figure}")
    return 0


def cmd_upscale(args) -> int:
    planner = _make_planner(args)
    spec = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = upscale_sweep(spec, planner, _parse_counts(args.counts),
                              args.episodes, args.seed)
    for summary in summaries:
        print(f"n={summary.n_agents}: success {summary.success_rate:.2f} "
              f"+/- {summary.success_sem:.3f}")
    table = report.write_summary_csv(summaries, out / "upscale_summary.csv")
    figure = report.plot_success_bars(summaries, out / "upscale_success.png",
                                      title="Upscaled deployment success")
    print(f"wrote {table} and {figure}")
    return 0


def _parse_changes(text: str) -> list[RosterChange]:
    """Parse ``30:add,60:retire:0`` into roster changes."""
    changes = []
    for item in text.split(","):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) == 2 and parts[1] == "add":
            changes.append(RosterChange(step=int(parts[0]), action="add"))
        elif len(parts) == 3 and parts[1] == "retire":
            changes.append(RosterChange(step=int(parts[0]), action="retire",
                                        slot=int(parts[2])))
        else:
            raise ValueError(f"cannot parse roster change {item!r}")
    return changes


def cmd_dynamic(args) -> int:
    planner = _make_planner(args)
    spec = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_episode_dynamic(spec, args.initial_agents,
                                 _parse_changes(args.changes), planner,
                                 args.seed)
    record = {
        "completed": result.completed,
        "steps": result.steps,
        "windows": result.windows,
        "applied_changes": result.applied_changes,
        "final_success": result.final_success.tolist(),
        "mask_consistent": result.mask_consistent,
        "slot_history": [[s, list(slots)] for s, slots in result.slot_history],
    }
    path = out / "dynamic_result.json"
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
    print(json.dumps(record, indent=2))
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    spec = _scenario(args)
    out = Path(args.out)
    results = ablate_mod.ablation_suite(
        args.data, cfg, spec, _parse_counts(args.counts),
        args.episodes, out, args.seed,
    )
    grid = {
        name: {str(n): s.success_rate for n, s in entry["summaries"].items()}
        for name, entry in results.items()
    }
    table = report.write_grid_csv(grid, out / "ablation_grid.csv")
    figure = report.plot_grid_bars(grid, out / "ablation_success.png")
    curves = report.plot_loss_curves(
        {name: entry["metrics"] for name, entry in results.items()},
        out / "ablation_loss.png",
    )
    for name in sorted(grid):
        print(f"{name}: " + ", ".join(
            f"n={n}:{rate:.2f}" for n, rate in sorted(grid[name].items())
        ))
    print(f"wrote {table}, {figure}, {curves}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.metrics:
        named = {Path(p).parent.name or f"run{i}": p
                 for i, p in enumerate(args.metrics)}
        wrote.append(report.plot_loss_curves(named, out / "loss_curves.png"))
    if args.summary:
        import csv as _csv

        from .executor import EvalSummary

        with open(args.summary) as fh:
            rows = list(_csv.DictReader(fh))
        summaries = [
            EvalSummary(
                scenario_id=r["scenario_id"], n_agents=int(r["n_agents"]),
                episodes=int(r["episodes"]),
                success_rate=float(r["success_rate"]),
                success_sem=float(r["success_sem"]),
                mean_pair_collisions=float(r["mean_pair_collisions"]),
                mean_obstacle_collisions=float(r["mean_obstacle_collisions"]),
                mean_sample_seconds=float(r["mean_sample_seconds"]),
                mean_steps=float(r["mean_steps"]),
            )
            for r in rows
        ]
        wrote.append(report.plot_success_bars(summaries, out / "success_bars.png"))
    if not wrote:
        raise ValueError("nothing to plot: pass --metrics and/or --summary")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def _add_scenario_args(parser, default_max_steps=None):
    parser.add_argument("--scenario", default="empty",
                        choices=["empty", "obstacle", "barrier"])
    parser.add_argument("--scenario-file", help="YAML scenario overriding --scenario")
    parser.add_argument("--scenario-seed", type=int, default=0)
    parser.add_argument("--max-steps", type=int, default=default_max_steps)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffnav",
        description="Diffusion-based multi-robot trajectory planning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect demonstrator episodes")
    _add_scenario_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--agents", default="1,2,3", help="comma-separated counts")
    p.add_argument("--episodes-per-count", type=int, default=100)
    p.add_argument("--frame-resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.FIELD=VALUE")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    _add_scenario_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--agents", default="3")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upscale", help="sweep deployment agent counts")
    _add_scenario_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="2,3,4,5,6")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("dynamic", help="episode with agents added/retired")
    _add_scenario_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--initial-agents", type=int, default=2)
    p.add_argument("--changes", default="30:add,60:retire:0")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dynamic)

    p = sub.add_parser("ablate", help="train and compare the variant grid")
    _add_scenario_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.FIELD=VALUE")
    p.add_argument("--counts", default="4,6")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="re-render figures from logs/tables")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", nargs="*", default=[],
                   help="train_metrics.jsonl files")
    p.add_argument("--summary", help="eval/upscale summary CSV")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"diffnav: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
