"""Receding-horizon execution of the trained planner.

Each replan renders the current scene, pins the window start to the current
positions and the window end to a straight-line subgoal capped at the
distance reachable within one horizon, samples a trajectory window under
those constraints, and tracks its waypoints with a PD law for ``stride``
simulator steps. Agent slots are assigned once per episode; mid-episode
roster changes re-sample the window with an updated mask.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExecConfig
from .context import ContextToken
from .diffusion import NoiseSchedule, boundary_constraints, sample
from .sim import (ScenarioSpec, SpawnError, WorldState, check_success,
                  count_collisions, obstacle_surface_distances, render_frame,
                  reset, step)


@dataclass
class EpisodeResult:
    success: bool
    agent_success: np.ndarray          # (n,) flags at episode end
    steps: int
    windows: int
    pair_collisions: int
    obstacle_collisions: int
    sample_times: list[float]
    trajectory: np.ndarray             # (steps + 1, n, 2)


@dataclass
class EvalSummary:
    scenario_id: str
    n_agents: int
    episodes: int
    success_rate: float
    success_sem: float
    mean_pair_collisions: float
    mean_obstacle_collisions: float
    mean_sample_seconds: float
    mean_steps: float

    def as_row(self) -> dict:
        return dataclasses.asdict(self)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def subgoal_toward(positions: np.ndarray, goals: np.ndarray, v_max: float,
                   horizon: int) -> np.ndarray:
    """Point on the straight segment to the goal, at most v_max * H away."""
    offset = goals - positions
    dist = np.linalg.norm(offset, axis=1, keepdims=True)
    reach = np.minimum(dist, v_max * horizon)
    direction = offset / np.maximum(dist, 1e-12)
    return positions + direction * reach


def pd_action(waypoint: np.ndarray, waypoint_vel: np.ndarray,
              positions: np.ndarray, velocities: np.ndarray,
              kp: float, kd: float) -> np.ndarray:
    return kp * (waypoint - positions) + kd * (waypoint_vel - velocities)


class Planner:
    """Wraps a loaded checkpoint for window sampling in world coordinates."""

    def __init__(self, payload: dict, exec_cfg: ExecConfig | None = None):
        self.model = payload["model"]
        self.schedule: NoiseSchedule = payload["schedule"]
        self.cfg = payload["run_config"]
        self.center = np.asarray(payload["normalization"]["center"])
        self.scale = float(payload["normalization"]["scale"])
        self.exec_cfg = exec_cfg or ExecConfig(horizon=self.cfg.model.horizon,
                                               stride=self.cfg.model.horizon)
        if self.exec_cfg.horizon != self.cfg.model.horizon:
            raise ValueError(
                f"execution horizon {self.exec_cfg.horizon} != model horizon "
                f"{self.cfg.model.horizon}"
            )
        if not 1 <= self.exec_cfg.stride <= self.exec_cfg.horizon:
            raise ValueError("stride must lie in [1, horizon]")

    @property
    def n_max(self) -> int:
        return self.cfg.model.n_max

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.scale

    def _denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.center

    def plan(self, state: WorldState, slots: list[int], goals: np.ndarray,
             seed: int) -> np.ndarray:
        """Sample one window; returns world-coordinate waypoints (H, n, 2)."""
        n = state.n_agents
        N = self.n_max
        H = self.exec_cfg.horizon
        if len(slots) != n or len(set(slots)) != n or max(slots) >= N:
            raise ValueError(f"invalid slot assignment {slots} for {n} agents")
        frame = render_frame(state, self.cfg.model.frame_resolution)
        subgoals = subgoal_toward(state.positions, goals, state.spec.v_max, H)

        current = np.zeros((N, 2), dtype=np.float32)
        target = np.zeros((N, 2), dtype=np.float32)
        mask = np.zeros(N, dtype=bool)
        current[slots] = self._normalize(state.positions).astype(np.float32)
        target[slots] = self._normalize(subgoals).astype(np.float32)
        mask[slots] = True

        token = ContextToken(
            frames=torch.from_numpy(frame[None]),
            current=torch.from_numpy(current[None]),
            goals=torch.from_numpy(target[None]),
            mask=torch.from_numpy(mask[None]),
            n_agents=torch.tensor([n], dtype=torch.long),
        )
        constraints = boundary_constraints(
            token.current, token.goals, token.mask, H
        )
        gen = torch.Generator().manual_seed(seed)
        window = sample(self.model, self.schedule, token, constraints, gen)
        window = window[0].numpy()                      # (H, N, 2)
        return self._denormalize(window[:, slots, :].astype(np.float64))


def _track_window(state: WorldState, waypoints: np.ndarray, stride: int,
                  kp: float, kd: float, counters: dict,
                  trajectory: list) -> WorldState:
    """Follow one planned window for up to ``stride`` steps."""
    H = waypoints.shape[0]
    for s in range(1, stride + 1):
        idx = min(s, H - 1)
        wp_vel = waypoints[idx] - waypoints[idx - 1]
        act = pd_action(waypoints[idx], wp_vel, state.positions,
                        state.velocities, kp, kd)
        state = step(state, act)
        pairs, obstacles = count_collisions(state)
        counters["pairs"] += pairs
        counters["obstacles"] += obstacles
        trajectory.append(state.positions.copy())
        if check_success(state).all() or state.terminal:
            break
    return state


def run_episode(spec: ScenarioSpec, n_agents: int, planner: Planner,
                seed: int) -> EpisodeResult:
    """Closed-loop episode: replan every ``stride`` steps until success/cap."""
    if n_agents > planner.n_max:
        raise ValueError(f"{n_agents} agents exceed the model's {planner.n_max} slots")
    state = reset(spec, n_agents, seed)
    slots = list(range(n_agents))
    goals = state.goals
    trajectory = [state.positions.copy()]
    counters = {"pairs": 0, "obstacles": 0}
    sample_times: list[float] = []
    windows = 0
    while not state.terminal and not check_success(state).all():
        tic = time.perf_counter()
        waypoints = planner.plan(state, slots, goals,
                                 _derived_seed(planner.exec_cfg.seed, seed, windows))
        sample_times.append(time.perf_counter() - tic)
        windows += 1
        state = _track_window(state, waypoints, planner.exec_cfg.stride,
                              planner.exec_cfg.kp, planner.exec_cfg.kd,
                              counters, trajectory)
    flags = check_success(state)
    return EpisodeResult(
        success=bool(flags.all()),
        agent_success=flags,
        steps=state.step_count,
        windows=windows,
        pair_collisions=counters["pairs"],
        obstacle_collisions=counters["obstacles"],
        sample_times=sample_times,
        trajectory=np.asarray(trajectory),
    )


# ---------------------------------------------------------------------------
# Dynamic agent counts


@dataclass
class RosterChange:
    step: int
    action: str                  # "add" | "retire"
    slot: int | None = None      # required for "retire"


@dataclass
class DynamicResult:
    completed: bool
    final_success: np.ndarray
    steps: int
    windows: int
    applied_changes: int
    slot_history: list[tuple[int, tuple[int, ...]]]
    mask_consistent: bool


def _sample_clear(spec: ScenarioSpec, rng: np.random.Generator,
                  avoid: np.ndarray, min_sep: float, max_draws: int,
                  what: str) -> np.ndarray:
    limit = spec.arena - spec.agent_radius
    clearance = spec.agent_radius + spec.obstacle_clearance
    for _ in range(max_draws):
        pt = rng.uniform(-limit, limit, size=2)
        if obstacle_surface_distances(pt[None], spec)[0] < clearance:
            continue
        if len(avoid) and np.any(np.linalg.norm(avoid - pt, axis=1) <= min_sep):
            continue
        return pt
    raise SpawnError(f"could not place {what} for an added agent")


def _spawn_one(state: WorldState, rng: np.random.Generator,
               max_draws: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Sample a clear spawn position and goal for one added agent."""
    spec = state.spec
    min_sep = 2.0 * spec.agent_radius + spec.spawn_margin
    pos = _sample_clear(spec, rng, state.positions, min_sep, max_draws, "a spawn")
    goal = _sample_clear(spec, rng, state.goals, min_sep, max_draws, "a goal")
    return pos, goal


def run_episode_dynamic(spec: ScenarioSpec, n_initial: int,
                        changes: list[RosterChange], planner: Planner,
                        seed: int) -> DynamicResult:
    """Episode with mid-flight roster changes.

    Changes fire at their scheduled step (before replanning); each addition
    takes the lowest free slot, each retirement frees one. Slot/mask
    consistency is checked after every window and reported in the result.
    """
    changes = sorted(changes, key=lambda c: c.step)
    state = reset(spec, n_initial, seed)
    slots = list(range(n_initial))
    goals = state.goals
    rng = np.random.default_rng(_derived_seed(seed, 7001))
    trajectory = [state.positions.copy()]
    counters = {"pairs": 0, "obstacles": 0}
    applied = 0
    windows = 0
    consistent = True
    history: list[tuple[int, tuple[int, ...]]] = [(0, tuple(slots))]

    def pending() -> list[RosterChange]:
        return [c for c in changes[applied:] if c.step <= state.step_count]

    while not state.terminal:
        for change in pending():
            if change.action == "add":
                if len(slots) >= planner.n_max:
                    raise ValueError("no free slot for added agent")
                pos, goal = _spawn_one(state, rng)
                state = dataclasses.replace(
                    state,
                    positions=np.vstack([state.positions, pos]),
                    velocities=np.vstack([state.velocities, np.zeros(2)]),
                    goals=np.vstack([state.goals, goal]),
                )
                goals = state.goals
                free = sorted(set(range(planner.n_max)) - set(slots))
                slots.append(free[0])
            elif change.action == "retire":
                if change.slot not in slots:
                    raise ValueError(f"cannot retire slot {change.slot}: not active")
                idx = slots.index(change.slot)
                keep = [i for i in range(state.n_agents) if i != idx]
                state = dataclasses.replace(
                    state,
                    positions=state.positions[keep],
                    velocities=state.velocities[keep],
                    goals=state.goals[keep],
                )
                goals = state.goals
                slots.pop(idx)
            else:
                raise ValueError(f"unknown roster action {change.action!r}")
            applied += 1
            history.append((state.step_count, tuple(slots)))
        if not slots:
            break
        if applied == len(changes) and check_success(state).all():
            break
        waypoints = planner.plan(state, slots, goals,
                                 _derived_seed(planner.exec_cfg.seed, seed, windows))
        windows += 1
        upcoming = [c.step for c in changes[applied:]]
        stride = planner.exec_cfg.stride
        if upcoming:
            stride = min(stride, max(1, upcoming[0] - state.step_count))
        state = _track_window(state, waypoints, stride, planner.exec_cfg.kp,
                              planner.exec_cfg.kd, counters, trajectory)
        consistent = consistent and len(slots) == state.n_agents \
            and len(set(slots)) == len(slots)

    return DynamicResult(
        completed=applied == len(changes),
        final_success=check_success(state) if state.n_agents else np.array([], bool),
        steps=state.step_count,
        windows=windows,
        applied_changes=applied,
        slot_history=history,
        mask_consistent=consistent,
    )


# ---------------------------------------------------------------------------
# Evaluation and upscaling


def evaluate(spec: ScenarioSpec, planner: Planner, n_agents: int,
             episodes: int = 20, base_seed: int = 0) -> EvalSummary:
    """Repeat episodes with derived seeds and aggregate the outcomes."""
    outcomes = []
    pairs = []
    obstacles = []
    times = []
    steps = []
    for i in range(episodes):
        result = run_episode(spec, n_agents, planner,
                             _derived_seed(base_seed, n_agents, i))
        outcomes.append(1.0 if result.success else 0.0)
        pairs.append(result.pair_collisions)
        obstacles.append(result.obstacle_collisions)
        times.extend(result.sample_times)
        steps.append(result.steps)
    outcomes = np.asarray(outcomes)
    sem = float(outcomes.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalSummary(
        scenario_id=spec.scenario_id,
        n_agents=n_agents,
        episodes=episodes,
        success_rate=float(outcomes.mean()),
        success_sem=sem,
        mean_pair_collisions=float(np.mean(pairs)),
        mean_obstacle_collisions=float(np.mean(obstacles)),
        mean_sample_seconds=float(np.mean(times)) if times else 0.0,
        mean_steps=float(np.mean(steps)),
    )


UPSCALE_CAP = 8


def upscale_sweep(spec: ScenarioSpec, planner: Planner,
                  deploy_counts: list[int], episodes: int = 20,
                  base_seed: int = 0) -> list[EvalSummary]:
    """Evaluate one checkpoint across deployment counts (hard cap at 8)."""
    for n in deploy_counts:
        if n < 1 or n > UPSCALE_CAP:
            raise ValueError(f"deploy count {n} outside [1, {UPSCALE_CAP}]")
        if n > planner.n_max:
            raise ValueError(f"deploy count {n} exceeds model slots {planner.n_max}")
    return [evaluate(spec, planner, n, episodes, base_seed) for n in deploy_counts]
