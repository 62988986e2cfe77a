"""Configuration dataclasses, YAML round-trip helpers, and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

CONFIG_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Sizes every learnable component; shared by training and inference."""

    n_max: int = 8                # agent slots the network is built for
    state_dim: int = 2            # per-agent state entries per timestep
    horizon: int = 10             # window length in timesteps
    embed_dim: int = 64           # per-slot embedding width
    num_heads: int = 4
    mlp_hidden: int = 256
    encoder: str = "axial"        # "axial" | "linear"
    context_dim: int = 128
    time_embed_dim: int = 64
    frame_resolution: int = 64
    unet_base_width: int = 128
    unet_depth: int = 2
    # Group norm is per-sample, so batch composition (mixed noise levels,
    # mixed agent counts) cannot leak into eval-time statistics.
    norm: str = "group"           # "group" | "batch"
    group_norm_groups: int = 8


@dataclass
class DiffusionConfig:
    steps: int = 100              # K
    schedule: str = "cosine"      # "cosine" | "linear"
    beta_start: float = 1e-4     # linear endpoints at the 1000-step reference
    beta_end: float = 0.02


@dataclass
class LossWeights:
    """Weights of the composite training loss and its geometric clearances."""

    noise: float = 0.85
    boundary: float = 0.025
    temporal: float = 0.025
    collision: float = 0.1
    lambda_jerk: float = 1.0
    d_min: float = 0.1            # agent-agent clearance; 2 * agent_radius
    d_obs: float = 0.1            # agent-obstacle clearance (to center points)

    def as_vector(self):
        return [self.noise, self.boundary, self.temporal, self.collision]


@dataclass
class TrainConfig:
    epochs: int = 240
    batch_size: int = 32
    batches_per_epoch: int = 20
    lr: float = 3e-4
    grad_clip: float = 1.0
    n_max_train: int = 3
    # One agent is unlocked per period; None selects 1000 * n_max_train.
    curriculum_period: int | None = None
    seed: int = 0
    checkpoint_every: int = 0     # 0 disables periodic checkpoints
    randomize_slots: bool = True


@dataclass
class ExecConfig:
    horizon: int = 10
    stride: int = 10              # sim steps executed per sampled window
    kp: float = 0.35
    kd: float = 0.9
    seed: int = 0


@dataclass
class RunConfig:
    """Top-level bundle mirrored by the YAML config files."""

    format_version: int = CONFIG_FORMAT_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    exec: ExecConfig = field(default_factory=ExecConfig)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    version = data.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ValueError(f"unsupported config format_version {version}")
    parts = {}
    for key, cls in [
        ("model", ModelConfig),
        ("diffusion", DiffusionConfig),
        ("loss", LossWeights),
        ("train", TrainConfig),
        ("exec", ExecConfig),
    ]:
        parts[key] = _from_dict(cls, data.pop(key, {}))
    if data:
        raise ValueError(f"unknown config sections: {sorted(data)}")
    return RunConfig(format_version=version, **parts)


def load_run_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply dotted ``section.field=value`` overrides parsed from the CLI."""
    data = to_dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like section.field=value: {pair!r}")
        key, raw = pair.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config section in override {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"unknown config field in override {key!r}")
        node[leaf] = yaml.safe_load(raw)
    return run_config_from_dict(data)


def config_hash(cfg) -> str:
    """Stable hash of a config dataclass (or plain dict) for run identity."""
    data = cfg if isinstance(cfg, dict) else to_dict(cfg)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
