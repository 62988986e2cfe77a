"""Planar multi-robot arena: double-integrator dynamics, maps, rasterized frames.

Coordinates live in the square ``[-arena, arena]^2``. One call to :func:`step`
advances every agent by one unit timestep: velocity integrates the clipped
acceleration first, then position integrates the new velocity. Collisions are
counted, never resolved; episodes end on the step cap, not on contact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

SCENARIO_FORMAT_VERSION = 1

# Fixed per-agent render palette (RGB), reused cyclically past 8 agents.
AGENT_COLORS = np.array(
    [
        [214, 39, 40],
        [31, 119, 180],
        [44, 160, 44],
        [255, 127, 14],
        [148, 103, 189],
        [23, 190, 207],
        [227, 119, 194],
        [188, 189, 34],
    ],
    dtype=np.uint8,
)
BACKGROUND_COLOR = np.array([255, 255, 255], dtype=np.uint8)
OBSTACLE_COLOR = np.array([90, 90, 90], dtype=np.uint8)


class SpawnError(RuntimeError):
    """Raised when rejection sampling cannot place agents or goals."""


@dataclass
class CircleObstacle:
    center: tuple[float, float]
    radius: float


@dataclass
class RectObstacle:
    center: tuple[float, float]
    half_extents: tuple[float, float]


@dataclass
class ScenarioSpec:
    """Full arena description; serializes to YAML with versioned defaults."""

    scenario_id: str = "empty"
    arena: float = 1.0
    agent_radius: float = 0.05
    goal_tolerance: float = 0.1
    max_steps: int = 100
    a_max: float = 0.02
    v_max: float = 0.06
    spawn_margin: float = 0.08      # extra pairwise clearance beyond 2 radii
    obstacle_clearance: float = 0.05
    circles: list[CircleObstacle] = field(default_factory=list)
    rects: list[RectObstacle] = field(default_factory=list)
    format_version: int = SCENARIO_FORMAT_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        version = data.get("format_version", SCENARIO_FORMAT_VERSION)
        if version != SCENARIO_FORMAT_VERSION:
            raise ValueError(f"unsupported scenario format_version {version}")
        data["circles"] = [
            CircleObstacle(center=tuple(c["center"]), radius=float(c["radius"]))
            for c in data.get("circles", [])
        ]
        data["rects"] = [
            RectObstacle(
                center=tuple(r["center"]),
                half_extents=tuple(r["half_extents"]),
            )
            for r in data.get("rects", [])
        ]
        return cls(**data)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def obstacle_centers(self) -> np.ndarray:
        """Centers of all obstacles as an (n_obs, 2) array (may be empty)."""
        pts = [c.center for c in self.circles] + [r.center for r in self.rects]
        return np.asarray(pts, dtype=np.float64).reshape(len(pts), 2)


def make_scenario(kind: str, seed: int = 0) -> ScenarioSpec:
    """Build one of the preset maps.

    ``empty`` has no obstacles, ``obstacle`` scatters 3-5 circles, and
    ``barrier`` splits the arena with an axis-aligned wall that leaves a gap.
    Obstacle placement for ``obstacle`` is drawn deterministically from seed.
    """
    if kind == "empty":
        return ScenarioSpec(scenario_id="empty")
    if kind == "obstacle":
        rng = np.random.default_rng(seed)
        count = int(rng.integers(3, 6))
        circles = []
        for _ in range(count):
            for _attempt in range(200):
                center = rng.uniform(-0.55, 0.55, size=2)
                radius = float(rng.uniform(0.12, 0.2))
                if all(
                    np.linalg.norm(center - np.asarray(c.center)) > radius + c.radius + 0.15
                    for c in circles
                ):
                    circles.append(
                        CircleObstacle(center=(float(center[0]), float(center[1])), radius=radius)
                    )
                    break
            else:
                break
        return ScenarioSpec(scenario_id=f"obstacle-{seed}", circles=circles)
    if kind == "barrier":
        gap = 0.25
        half_h = (1.0 - gap) / 2.0
        rects = [
            RectObstacle(center=(0.0, gap + half_h), half_extents=(0.05, half_h)),
            RectObstacle(center=(0.0, -gap - half_h), half_extents=(0.05, half_h)),
        ]
        return ScenarioSpec(scenario_id="barrier", rects=rects)
    raise ValueError(f"unknown scenario kind {kind!r}")


@dataclass
class WorldState:
    """Snapshot of the arena: agent kinematics plus the spec that shaped it."""

    positions: np.ndarray        # (n, 2)
    velocities: np.ndarray       # (n, 2)
    goals: np.ndarray            # (n, 2)
    spec: ScenarioSpec
    step_count: int = 0
    rng_seed: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def terminal(self) -> bool:
        return self.step_count >= self.spec.max_steps


def obstacle_surface_distances(points: np.ndarray, spec: ScenarioSpec) -> np.ndarray:
    """Distance from each point to the nearest obstacle surface.

    Points inside an obstacle get distance 0. Returns +inf when the map has
    no obstacles.

    Args:
        points: (m, 2) query points.
    """
    points = np.atleast_2d(points)
    dists = np.full(points.shape[0], np.inf)
    for circ in spec.circles:
        d = np.linalg.norm(points - np.asarray(circ.center), axis=1) - circ.radius
        dists = np.minimum(dists, np.maximum(d, 0.0))
    for rect in spec.rects:
        lo = np.asarray(rect.center) - np.asarray(rect.half_extents)
        hi = np.asarray(rect.center) + np.asarray(rect.half_extents)
        nearest = np.clip(points, lo, hi)
        d = np.linalg.norm(points - nearest, axis=1)
        dists = np.minimum(dists, d)
    return dists


def _sample_clear_points(rng, spec: ScenarioSpec, n: int, min_sep: float,
                         max_draws: int, what: str) -> np.ndarray:
    """Rejection-sample n points with pairwise and obstacle clearance."""
    limit = spec.arena - spec.agent_radius
    clearance = spec.agent_radius + spec.obstacle_clearance
    placed: list[np.ndarray] = []
    for _ in range(max_draws):
        pt = rng.uniform(-limit, limit, size=2)
        if obstacle_surface_distances(pt[None, :], spec)[0] < clearance:
            continue
        if any(np.linalg.norm(pt - q) <= min_sep for q in placed):
            continue
        placed.append(pt)
        if len(placed) == n:
            return np.asarray(placed)
    raise SpawnError(
        f"could not place {n} {what} after {max_draws} draws "
        f"(min separation {min_sep:.3f}, scenario {spec.scenario_id!r}); "
        "the requested count does not fit this arena"
    )


def reset(spec: ScenarioSpec, n_agents: int, seed: int,
          max_draws: int = 4000) -> WorldState:
    """Spawn agents and goals collision-free via seeded rejection sampling.

    Same (spec, n_agents, seed) always produces the same state. Raises
    :class:`SpawnError` when the arena cannot fit the requested count.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be at least 1")
    rng = np.random.default_rng(seed)
    min_sep = 2.0 * spec.agent_radius + spec.spawn_margin
    positions = _sample_clear_points(rng, spec, n_agents, min_sep, max_draws, "agents")
    goals = _sample_clear_points(rng, spec, n_agents, min_sep, max_draws, "goals")
    return WorldState(
        positions=positions,
        velocities=np.zeros((n_agents, 2)),
        goals=goals,
        spec=spec,
        step_count=0,
        rng_seed=seed,
    )


def _clip_rows(vectors: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-12))
    return vectors * factor


def step(state: WorldState, actions: np.ndarray) -> WorldState:
    """Advance one timestep.

    Accelerations are clipped to ``a_max`` (per-agent Euclidean), velocities
    to ``v_max``, and positions clamp to the arena. Velocity updates first;
    the position uses the new velocity.
    """
    if state.terminal:
        raise RuntimeError(f"episode already at step cap {state.spec.max_steps}")
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != state.positions.shape:
        raise ValueError(f"actions shape {actions.shape} != {state.positions.shape}")
    accel = _clip_rows(actions, state.spec.a_max)
    velocities = _clip_rows(state.velocities + accel, state.spec.v_max)
    positions = np.clip(state.positions + velocities, -state.spec.arena, state.spec.arena)
    return dataclasses.replace(
        state,
        positions=positions,
        velocities=velocities,
        step_count=state.step_count + 1,
    )


def check_success(state: WorldState) -> np.ndarray:
    """Per-agent goal flags: within ``goal_tolerance`` of the goal (<=)."""
    dists = np.linalg.norm(state.positions - state.goals, axis=1)
    return dists <= state.spec.goal_tolerance


def count_collisions(state: WorldState) -> tuple[int, int]:
    """Count collisions in the current state.

    Returns (pair_collisions, obstacle_collisions): unordered agent pairs
    whose centers are closer than two radii, and agents whose distance to
    the nearest obstacle surface is below one radius.
    """
    n = state.n_agents
    pairs = 0
    if n > 1:
        diff = state.positions[:, None, :] - state.positions[None, :, :]
        dists = np.linalg.norm(diff, axis=-1)
        iu = np.triu_indices(n, k=1)
        pairs = int(np.sum(dists[iu] < 2.0 * state.spec.agent_radius))
    obstacle = 0
    if state.spec.circles or state.spec.rects:
        surface = obstacle_surface_distances(state.positions, state.spec)
        obstacle = int(np.sum(surface < state.spec.agent_radius))
    return pairs, obstacle


def _pixel_grid(resolution: int, arena: float) -> tuple[np.ndarray, np.ndarray]:
    # Pixel centers; row 0 maps to the top of the arena (y = +arena).
    coords = (np.arange(resolution) + 0.5) * (2.0 * arena / resolution) - arena
    xs = np.broadcast_to(coords[None, :], (resolution, resolution))
    ys = np.broadcast_to(-coords[:, None], (resolution, resolution))
    return xs, ys


def render_frame(state: WorldState, resolution: int = 64) -> np.ndarray:
    """Rasterize the scene to an RGB uint8 image of shape (res, res, 3).

    Obstacles draw first, then goal rings, then agent discs, each agent in
    its fixed palette color. Pure numpy; bitwise deterministic.
    """
    xs, ys = _pixel_grid(resolution, state.spec.arena)
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLOR

    for circ in state.spec.circles:
        mask = (xs - circ.center[0]) ** 2 + (ys - circ.center[1]) ** 2 <= circ.radius**2
        img[mask] = OBSTACLE_COLOR
    for rect in state.spec.rects:
        mask = (np.abs(xs - rect.center[0]) <= rect.half_extents[0]) & (
            np.abs(ys - rect.center[1]) <= rect.half_extents[1]
        )
        img[mask] = OBSTACLE_COLOR

    ring_width = 1.5 * (2.0 * state.spec.arena / resolution)
    for i in range(state.n_agents):
        color = AGENT_COLORS[i % len(AGENT_COLORS)]
        gx, gy = state.goals[i]
        d2 = (xs - gx) ** 2 + (ys - gy) ** 2
        outer = state.spec.goal_tolerance
        inner = max(outer - ring_width, 0.0)
        img[(d2 <= outer**2) & (d2 >= inner**2)] = color
    for i in range(state.n_agents):
        color = AGENT_COLORS[i % len(AGENT_COLORS)]
        px, py = state.positions[i]
        mask = (xs - px) ** 2 + (ys - py) ** 2 <= state.spec.agent_radius**2
        img[mask] = color
    return img
