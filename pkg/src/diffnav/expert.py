"""Scripted potential-field demonstrator and dataset collection.

The demonstrator steers each agent with a desired-velocity field: an
attractive term toward the goal (saturating at ``v_max``, slowing inside
``slow_radius``) plus repulsive terms from nearby agents and obstacles.
Each repulsive term also carries a small tangential component (a fixed
counter-clockwise rotation of the radial push) so head-on encounters break
symmetry instead of deadlocking. The action is a proportional pull of the
current velocity toward the desired velocity; the simulator's clipping
applies on top.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import ScenarioSpec, WorldState, check_success, render_frame, reset, step

DATASET_FORMAT_VERSION = 1


class CollectionError(RuntimeError):
    """Raised when the demonstrator's success yield falls below the floor."""


@dataclass
class ExpertGains:
    k_v: float = 0.5            # pull of velocity toward the desired velocity
    slow_radius: float = 0.2    # distance at which the approach starts braking
    k_rep: float = 0.003
    influence: float = 0.35     # repulsion cutoff distance d0
    k_tan: float = 0.4          # tangential fraction of each radial push
    dist_floor: float = 1e-3


def _perp(v: np.ndarray) -> np.ndarray:
    # Counter-clockwise quarter turn.
    return np.array([-v[1], v[0]])


def _repulsion(offset: np.ndarray, surface_dist: float, gains: ExpertGains,
               v_max: float) -> np.ndarray:
    """Bounded repulsive velocity for one source at the given offset."""
    d = max(surface_dist, gains.dist_floor)
    if d >= gains.influence:
        return np.zeros(2)
    mag = gains.k_rep * (1.0 / d - 1.0 / gains.influence) / (d * d)
    mag = min(mag, v_max)
    direction = offset / max(np.linalg.norm(offset), gains.dist_floor)
    return mag * (direction + gains.k_tan * _perp(direction))


def expert_policy(state: WorldState, gains: ExpertGains | None = None) -> np.ndarray:
    """Compute accelerations (n, 2) for every agent in the state."""
    gains = gains or ExpertGains()
    spec = state.spec
    n = state.n_agents
    actions = np.zeros((n, 2))
    for i in range(n):
        p = state.positions[i]
        to_goal = state.goals[i] - p
        dist = np.linalg.norm(to_goal)
        if dist > 1e-12:
            speed = spec.v_max * min(1.0, dist / gains.slow_radius)
            v_des = speed * to_goal / dist
        else:
            v_des = np.zeros(2)
        for j in range(n):
            if j == i:
                continue
            offset = p - state.positions[j]
            gap = np.linalg.norm(offset) - 2.0 * spec.agent_radius
            v_des = v_des + _repulsion(offset, gap, gains, spec.v_max)
        for circ in spec.circles:
            offset = p - np.asarray(circ.center)
            gap = np.linalg.norm(offset) - circ.radius - spec.agent_radius
            v_des = v_des + _repulsion(offset, gap, gains, spec.v_max)
        for rect in spec.rects:
            lo = np.asarray(rect.center) - np.asarray(rect.half_extents)
            hi = np.asarray(rect.center) + np.asarray(rect.half_extents)
            nearest = np.clip(p, lo, hi)
            offset = p - nearest
            if np.linalg.norm(offset) < 1e-9:
                offset = p - np.asarray(rect.center)
            gap = np.linalg.norm(p - nearest) - spec.agent_radius
            v_des = v_des + _repulsion(offset, gap, gains, spec.v_max)
        actions[i] = gains.k_v * (v_des - state.velocities[i])
    return actions


def run_expert_episode(spec: ScenarioSpec, n_agents: int, seed: int,
                       gains: ExpertGains | None = None,
                       frame_resolution: int = 64) -> dict:
    """Roll one full episode; returns arrays plus the final success flag.

    Episodes always run for exactly ``spec.max_steps`` steps so every record
    has the same length; success is judged at the final state.
    """
    state = reset(spec, n_agents, seed)
    frame = render_frame(state, frame_resolution)
    positions = [state.positions.copy()]
    velocities = [state.velocities.copy()]
    actions = []
    for _ in range(spec.max_steps):
        act = expert_policy(state, gains)
        state = step(state, act)
        actions.append(act)
        positions.append(state.positions.copy())
        velocities.append(state.velocities.copy())
    return {
        "positions": np.asarray(positions),      # (T+1, n, 2)
        "velocities": np.asarray(velocities),
        "actions": np.asarray(actions),          # (T, n, 2)
        "goals": state.goals.copy(),
        "frame": frame,
        "seed": seed,
        "success": bool(check_success(state).all()),
    }


def _episode_seed(dataset_seed: int, n_agents: int, attempt: int) -> int:
    ss = np.random.SeedSequence([dataset_seed, n_agents, attempt])
    return int(ss.generate_state(1)[0])


def collect_dataset(spec: ScenarioSpec, out_dir: str | Path,
                    agent_counts: list[int], episodes_per_count: int,
                    seed: int = 0, gains: ExpertGains | None = None,
                    frame_resolution: int = 64,
                    yield_floor: float = 0.5) -> Path:
    """Collect successful demonstrator episodes into ``out_dir``.

    Only episodes where every agent ends inside goal tolerance are kept.
    Aborts with :class:`CollectionError` if the success yield for any agent
    count drops below ``yield_floor``. Fully deterministic in ``seed``.

    Returns the manifest path.
    """
    if not 0.0 < yield_floor <= 1.0:
        raise ValueError("yield_floor must lie in (0, 1]")
    out_dir = Path(out_dir)
    ep_dir = out_dir / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)

    records = []
    counts: dict[str, int] = {}
    max_abs = 0.0
    for n in agent_counts:
        kept = 0
        attempts = 0
        budget = max(1, math.ceil(episodes_per_count / yield_floor))
        while kept < episodes_per_count:
            if attempts >= budget:
                raise CollectionError(
                    f"success yield for n={n} fell below {yield_floor:.0%}: "
                    f"{kept}/{attempts} episodes kept; adjust the scenario or gains"
                )
            ep_seed = _episode_seed(seed, n, attempts)
            attempts += 1
            episode = run_expert_episode(spec, n, ep_seed, gains, frame_resolution)
            if not episode["success"]:
                continue
            name = f"ep-n{n}-{kept:04d}.npz"
            np.savez(
                ep_dir / name,
                positions=episode["positions"].astype("<f8"),
                velocities=episode["velocities"].astype("<f8"),
                actions=episode["actions"].astype("<f8"),
                goals=episode["goals"].astype("<f8"),
                frame=episode["frame"].astype("<u1"),
            )
            records.append(
                {
                    "file": f"episodes/{name}",
                    "n_agents": n,
                    "seed": ep_seed,
                    "length": int(episode["positions"].shape[0]),
                    "success": True,
                }
            )
            max_abs = max(max_abs, float(np.abs(episode["positions"]).max()))
            kept += 1
        counts[str(n)] = kept

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "scenario": spec.to_dict(),
        "frame_resolution": frame_resolution,
        "seed": seed,
        "episode_length": spec.max_steps + 1,
        "normalization": {"center": [0.0, 0.0], "scale": max(max_abs, 1e-6)},
        "counts": counts,
        "episodes": records,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
