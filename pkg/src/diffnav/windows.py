"""Dataset manifest loading and training-window sampling.

Episodes are stored one ``.npz`` per episode (little-endian arrays with the
standard dtype/shape headers) next to a JSON manifest that carries the
scenario, per-episode index, agent-count histogram, and the normalization
constants applied to every window this module hands out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim import ScenarioSpec


@dataclass
class EpisodeData:
    positions: np.ndarray    # (T, n, 2) raw world coordinates
    frame: np.ndarray        # (res, res, 3) uint8, scene at episode start
    goals: np.ndarray        # (n, 2)
    n_agents: int
    seed: int


@dataclass
class Manifest:
    root: Path
    scenario: ScenarioSpec
    frame_resolution: int
    episode_length: int
    center: np.ndarray
    scale: float
    counts: dict[int, int]
    episodes: list[dict]
    format_version: int


def load_manifest(dataset_dir: str | Path) -> Manifest:
    """Read and validate a dataset manifest; checks every episode file exists."""
    root = Path(dataset_dir)
    path = root / "manifest.json"
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format_version {data.get('format_version')}")
    episodes = data["episodes"]
    for rec in episodes:
        if not (root / rec["file"]).exists():
            raise FileNotFoundError(f"manifest references missing episode {rec['file']}")
    hist: dict[int, int] = {}
    for rec in episodes:
        hist[rec["n_agents"]] = hist.get(rec["n_agents"], 0) + 1
    declared = {int(k): v for k, v in data["counts"].items()}
    if hist != declared:
        raise ValueError(f"manifest count histogram {declared} != episodes {hist}")
    norm = data["normalization"]
    return Manifest(
        root=root,
        scenario=ScenarioSpec.from_dict(data["scenario"]),
        frame_resolution=int(data["frame_resolution"]),
        episode_length=int(data["episode_length"]),
        center=np.asarray(norm["center"], dtype=np.float64),
        scale=float(norm["scale"]),
        counts=declared,
        episodes=episodes,
        format_version=int(data["format_version"]),
    )


def load_episode(manifest: Manifest, record: dict) -> EpisodeData:
    with np.load(manifest.root / record["file"]) as arrays:
        positions = arrays["positions"]
        frame = arrays["frame"]
        goals = arrays["goals"]
    if positions.shape[0] != manifest.episode_length:
        raise ValueError(
            f"episode {record['file']} length {positions.shape[0]} "
            f"!= manifest episode_length {manifest.episode_length}"
        )
    return EpisodeData(
        positions=positions,
        frame=frame,
        goals=goals,
        n_agents=int(record["n_agents"]),
        seed=int(record["seed"]),
    )


@dataclass
class WindowBatch:
    """One training batch of fixed-length position windows, slot-padded."""

    windows: np.ndarray    # (B, H, n_max, 2) float32, normalized
    mask: np.ndarray       # (B, n_max) bool
    starts: np.ndarray     # (B, n_max, 2) float32, normalized window starts
    subgoals: np.ndarray   # (B, n_max, 2) float32, normalized window ends
    frames: np.ndarray     # (B, res, res, 3) uint8
    n_agents: np.ndarray   # (B,) int64


class WindowDataset:
    """In-memory view over a dataset, sliced into diffusion training windows.

    Masked agent slots hold exact zeros. When ``randomize_slots`` is on,
    each window's agents land in a random slot subset so every slot (and its
    positional embedding) sees training signal; otherwise agents occupy the
    leading slots.
    """

    def __init__(self, manifest: Manifest, n_max: int, horizon: int,
                 randomize_slots: bool = True):
        if horizon < 2:
            raise ValueError("horizon must be at least 2")
        if manifest.episode_length < horizon:
            raise ValueError(
                f"episodes of length {manifest.episode_length} are shorter "
                f"than the requested horizon {horizon}"
            )
        self.manifest = manifest
        self.n_max = n_max
        self.horizon = horizon
        self.randomize_slots = randomize_slots
        self.episodes = [load_episode(manifest, rec) for rec in manifest.episodes]
        for ep in self.episodes:
            if ep.n_agents > n_max:
                raise ValueError(
                    f"episode with {ep.n_agents} agents exceeds n_max={n_max}"
                )

    def indices_with_at_most(self, n_agents: int) -> np.ndarray:
        return np.asarray(
            [i for i, ep in enumerate(self.episodes) if ep.n_agents <= n_agents],
            dtype=np.int64,
        )

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        return (positions - self.manifest.center) / self.manifest.scale

    def denormalize(self, positions: np.ndarray) -> np.ndarray:
        return positions * self.manifest.scale + self.manifest.center

    def sample(self, batch_size: int, rng: np.random.Generator,
               allowed: np.ndarray | None = None) -> WindowBatch:
        """Draw a batch of windows uniformly over episodes and start offsets."""
        if allowed is None:
            allowed = np.arange(len(self.episodes), dtype=np.int64)
        if len(allowed) == 0:
            raise ValueError("no episodes available under the current filter")
        H, N = self.horizon, self.n_max
        res = self.manifest.frame_resolution
        B = batch_size
        windows = np.zeros((B, H, N, 2), dtype=np.float32)
        mask = np.zeros((B, N), dtype=bool)
        frames = np.zeros((B, res, res, 3), dtype=np.uint8)
        n_agents = np.zeros(B, dtype=np.int64)
        for b in range(B):
            ep = self.episodes[int(rng.choice(allowed))]
            T = ep.positions.shape[0]
            offset = int(rng.integers(0, T - H + 1))
            segment = self.normalize(ep.positions[offset : offset + H])  # (H, n, 2)
            n = ep.n_agents
            if self.randomize_slots:
                slots = rng.choice(N, size=n, replace=False)
            else:
                slots = np.arange(n)
            windows[b, :, slots, :] = segment.transpose(1, 0, 2).astype(np.float32)
            mask[b, slots] = True
            frames[b] = ep.frame
            n_agents[b] = n
        starts = windows[:, 0].copy()
        subgoals = windows[:, -1].copy()
        return WindowBatch(
            windows=windows,
            mask=mask,
            starts=starts,
            subgoals=subgoals,
            frames=frames,
            n_agents=n_agents,
        )


def sample_windows(dataset: WindowDataset, batch_size: int,
                   rng: np.random.Generator,
                   max_agents: int | None = None) -> WindowBatch:
    """Functional wrapper over :meth:`WindowDataset.sample`."""
    allowed = None
    if max_agents is not None:
        allowed = dataset.indices_with_at_most(max_agents)
    return dataset.sample(batch_size, rng, allowed)
