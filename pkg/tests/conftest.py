"""Shared fixtures for the desk-scale acceptance run.

Building the acceptance artifacts (a 360-episode dataset and a trained
checkpoint) takes a while on CPU, so both are cached under
``tests/.cache`` keyed by their generating configuration.  Data
generation and training are bit-deterministic, which makes the cache
safe: a rebuild from a clean tree produces identical files.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest

from diffnav.config import (DiffusionConfig, LossWeights, ModelConfig,
                            RunConfig, TrainConfig, config_hash)
from diffnav.diffusion import load_checkpoint, train
from diffnav.expert import collect_dataset
from diffnav.sim import make_scenario

CACHE_DIR = Path(__file__).resolve().parent / ".cache"

DESK_EPISODES_PER_COUNT = 120
DESK_DATA_MAX_STEPS = 72
DESK_FRAME_RESOLUTION = 32


def desk_run_config() -> RunConfig:
    """Training configuration used for the acceptance checkpoint."""
    return RunConfig(
        model=ModelConfig(n_max=8, embed_dim=48, num_heads=4, mlp_hidden=96,
                          context_dim=64, time_embed_dim=48,
                          frame_resolution=DESK_FRAME_RESOLUTION,
                          unet_base_width=64, unet_depth=2),
        diffusion=DiffusionConfig(steps=60),
        train=TrainConfig(epochs=1500, batch_size=32, batches_per_epoch=20,
                          n_max_train=3, curriculum_period=120, seed=0),
        loss=LossWeights(),
    )


@pytest.fixture(scope="session")
def desk_dataset() -> Path:
    """Empty-map expert dataset: 120 episodes for each of n in {1, 2, 3}."""
    tag = (f"empty-c123x{DESK_EPISODES_PER_COUNT}"
           f"-T{DESK_DATA_MAX_STEPS}-r{DESK_FRAME_RESOLUTION}-s0")
    out = CACHE_DIR / f"data-{tag}"
    if not (out / "manifest.json").exists():
        spec = dataclasses.replace(make_scenario("empty", seed=0),
                                   max_steps=DESK_DATA_MAX_STEPS)
        collect_dataset(spec, out, agent_counts=[1, 2, 3],
                        episodes_per_count=DESK_EPISODES_PER_COUNT,
                        seed=0, frame_resolution=DESK_FRAME_RESOLUTION)
    return out


@pytest.fixture(scope="session")
def desk_checkpoint(desk_dataset: Path) -> Path:
    """Checkpoint trained on the desk dataset; cached by config hash."""
    cfg = desk_run_config()
    out = CACHE_DIR / f"ckpt-{config_hash(cfg)[:12]}"
    ckpt = out / "checkpoint.pt"
    if not ckpt.exists():
        train(desk_dataset, cfg, out)
    return ckpt


@pytest.fixture(scope="session")
def desk_payload(desk_checkpoint: Path):
    return load_checkpoint(desk_checkpoint)


@pytest.fixture(scope="session")
def ablation_dataset() -> Path:
    """Shorter-episode dataset for the variant grid: whole-episode variants
    train on full-length windows, so episode length drives their cost."""
    out = CACHE_DIR / "data-empty-c123x60-T40-r32-s0"
    if not (out / "manifest.json").exists():
        spec = dataclasses.replace(make_scenario("empty", seed=0),
                                   max_steps=40)
        collect_dataset(spec, out, agent_counts=[1, 2, 3],
                        episodes_per_count=60, seed=0, frame_resolution=32)
    return out
