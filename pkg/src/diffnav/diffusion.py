"""Diffusion core: noise schedule, composite loss, training loop, and the
deterministic constrained sampler.

Step-index convention: schedule arrays are 0-indexed, so ``alpha_bars[i]``
is the signal fraction after ``i + 1`` noising steps. :func:`forward_diffuse`
takes the number of applied steps ``k`` in ``[1, K]`` and reads
``alpha_bars[k - 1]``; the network is always conditioned on the array index
``k - 1``, which is exactly the index the reverse loop hands it at sampling
time.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import (DiffusionConfig, LossWeights, ModelConfig, RunConfig,
                     to_dict)
from .context import ContextToken
from .unet import Denoiser
from .windows import Manifest, WindowBatch, WindowDataset, load_manifest

CHECKPOINT_FORMAT_VERSION = 1

# Windows are normalized into [-1, 1]; clean-signal estimates reconstructed
# from a noise prediction can leave that range by orders of magnitude at high
# noise levels (the 1/sqrt(alpha_bar) factor), so both the trajectory-shape
# loss terms and the sampler clamp them to a small margin around the data box.
DENOISED_CLIP = 1.5


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass
class NoiseSchedule:
    kind: str
    betas: np.ndarray          # (K,) float64
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def _validate_schedule(s: NoiseSchedule) -> NoiseSchedule:
    if not np.all((s.betas > 0.0) & (s.betas < 1.0)):
        raise ValueError("betas must lie strictly inside (0, 1)")
    if not np.all(np.diff(s.alpha_bars) < 0.0):
        raise ValueError("cumulative signal fractions must strictly decrease")
    if s.alpha_bars[0] < 0.9:
        raise ValueError(f"first-step signal fraction {s.alpha_bars[0]:.4f} too low")
    if s.alpha_bars[-1] > 0.1:
        raise ValueError(f"final signal fraction {s.alpha_bars[-1]:.4f} too high")
    return s


def make_noise_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Build a linear or cosine schedule over ``cfg.steps`` steps.

    Linear endpoints are stated at the common 1000-step reference and scale
    inversely with the step count so the total noise budget stays put.
    """
    K = cfg.steps
    if K < 2:
        raise ValueError("need at least 2 diffusion steps")
    if cfg.schedule == "linear":
        scale = 1000.0 / K
        betas = np.linspace(cfg.beta_start * scale, cfg.beta_end * scale, K)
    elif cfg.schedule == "cosine":
        s = 0.008
        ks = np.arange(K + 1, dtype=np.float64)
        f = np.cos((ks / K + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {cfg.schedule!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return _validate_schedule(
        NoiseSchedule(kind=cfg.schedule, betas=betas, alphas=alphas,
                      alpha_bars=alpha_bars)
    )


def _gather_alpha_bar(schedule: NoiseSchedule, index: torch.Tensor,
                      like: torch.Tensor) -> torch.Tensor:
    table = torch.as_tensor(schedule.alpha_bars, dtype=like.dtype,
                            device=like.device)
    ab = table[index]
    return ab.reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(x0: torch.Tensor, k: torch.Tensor | int,
                    schedule: NoiseSchedule,
                    generator: torch.Generator | None = None
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply k noising steps in closed form; returns (x_k, noise).

    k counts applied steps, 1 <= k <= K, scalar or per batch element.
    """
    if not torch.is_tensor(k):
        k = torch.full((x0.shape[0],), int(k), dtype=torch.long, device=x0.device)
    if k.min() < 1 or k.max() > schedule.steps:
        raise ValueError(f"k must lie in [1, {schedule.steps}]")
    eps = torch.empty_like(x0).normal_(generator=generator)
    ab = _gather_alpha_bar(schedule, k - 1, x0)
    x_k = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return x_k, eps


def reconstruct_x0(x_k: torch.Tensor, eps_pred: torch.Tensor,
                   index: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the closed-form noising given a noise estimate at array index."""
    ab = _gather_alpha_bar(schedule, index, x_k)
    return (x_k - torch.sqrt(1.0 - ab) * eps_pred) / torch.sqrt(ab)


# ---------------------------------------------------------------------------
# Losses


def _active_counts(mask: torch.Tensor) -> torch.Tensor:
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("every batch element needs at least one active agent")
    return counts.to(torch.get_default_dtype())


def loss_noise(eps_pred: torch.Tensor, eps: torch.Tensor,
               mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over active-slot entries only."""
    _active_counts(mask)
    m = mask[:, None, :, None].to(eps.dtype)
    sq = (eps_pred - eps) ** 2 * m
    denom = m.expand_as(sq).sum()
    return sq.sum() / denom


def loss_boundary(x0_hat: torch.Tensor, starts: torch.Tensor,
                  subgoals: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Start and end anchoring: batch mean of per-agent endpoint deviations.

    For each element, the Euclidean deviation of the first timestep from the
    window start and of the last timestep from the window subgoal, averaged
    over active agents, summed over the two ends.
    """
    counts = _active_counts(mask)
    m = mask.to(x0_hat.dtype)
    d_start = torch.linalg.vector_norm(x0_hat[:, 0] - starts, dim=-1) * m
    d_end = torch.linalg.vector_norm(x0_hat[:, -1] - subgoals, dim=-1) * m
    per_elem = (d_start.sum(dim=1) + d_end.sum(dim=1)) / counts
    return per_elem.mean()


def loss_temporal(x0_hat: torch.Tensor, mask: torch.Tensor,
                  lambda_jerk: float = 1.0) -> torch.Tensor:
    """Smoothness: summed acceleration norms plus weighted jerk norms.

    Velocity, acceleration and jerk come from forward differences of the
    positions (unit timestep, zero-order hold between samples). Each term is
    summed over timesteps, averaged over active agents, then over the batch.
    Requires at least 4 timesteps so the jerk exists.
    """
    if x0_hat.shape[1] < 4:
        raise ValueError("temporal loss needs a horizon of at least 4")
    counts = _active_counts(mask)
    m = mask.to(x0_hat.dtype)
    vel = x0_hat[:, 1:] - x0_hat[:, :-1]
    acc = vel[:, 1:] - vel[:, :-1]
    jerk = acc[:, 1:] - acc[:, :-1]
    acc_norm = torch.linalg.vector_norm(acc, dim=-1).sum(dim=1) * m    # (B, N)
    jerk_norm = torch.linalg.vector_norm(jerk, dim=-1).sum(dim=1) * m
    per_elem = (acc_norm.sum(dim=1) + lambda_jerk * jerk_norm.sum(dim=1)) / counts
    return per_elem.mean()


def loss_collision(x0_hat: torch.Tensor, mask: torch.Tensor,
                   obstacles: torch.Tensor | None, d_min: float,
                   d_obs: float) -> torch.Tensor:
    """Clearance hinges, batch-averaged but summed over steps and pairs.

    Agent-agent terms hinge on ``d_min`` and count each ordered pair (both
    directions); obstacle terms hinge the distance to each obstacle center
    point on ``d_obs``.
    """
    _active_counts(mask)
    N = x0_hat.shape[2]
    eye = torch.eye(N, dtype=torch.bool, device=x0_hat.device)
    valid = (mask[:, None, :, None] & mask[:, None, None, :]) & ~eye[None, None]
    diff = x0_hat[:, :, :, None, :] - x0_hat[:, :, None, :, :]
    d2 = (diff**2).sum(dim=-1)
    # The sqrt has infinite slope at zero, so padded slots (parked at the
    # origin) and exactly coincident active pairs are both routed around it;
    # coincident pairs contribute the full hinge d_min with zero gradient,
    # a valid subgradient of the kink.
    coincident = valid & (d2 == 0)
    safe = valid & (d2 > 0)
    d2 = torch.where(safe, d2, torch.full_like(d2, (d_min + 1.0) ** 2))
    dist = torch.sqrt(d2)
    hinge = F.relu(d_min - dist) * safe.to(x0_hat.dtype)
    hinge = hinge + d_min * coincident.to(x0_hat.dtype)
    total = hinge.sum(dim=(1, 2, 3))
    if obstacles is not None and len(obstacles) > 0:
        obs = obstacles.to(x0_hat.dtype)
        odiff = x0_hat[:, :, :, None, :] - obs[None, None, None, :, :]
        od2 = (odiff**2).sum(dim=-1)
        ovalid = mask[:, None, :, None].expand_as(od2)
        ocoincident = ovalid & (od2 == 0)
        osafe = ovalid & (od2 > 0)
        od2 = torch.where(osafe, od2, torch.full_like(od2, (d_obs + 1.0) ** 2))
        ohinge = F.relu(d_obs - torch.sqrt(od2)) * osafe.to(x0_hat.dtype)
        ohinge = ohinge + d_obs * ocoincident.to(x0_hat.dtype)
        total = total + ohinge.sum(dim=(1, 2, 3))
    return total.mean()


def total_loss(model: Denoiser, x0: torch.Tensor, token: ContextToken,
               k: torch.Tensor, weights: LossWeights, schedule: NoiseSchedule,
               generator: torch.Generator | None = None,
               obstacles: torch.Tensor | None = None
               ) -> tuple[torch.Tensor, dict]:
    """Composite training loss on one batch; returns (scalar, term breakdown).

    Geometry arguments (obstacles, the clearances inside ``weights``) must
    already be expressed in the same normalized coordinates as ``x0``.
    """
    x_k, eps = forward_diffuse(x0, k, schedule, generator)
    if not torch.is_tensor(k):
        k = torch.full((x0.shape[0],), int(k), dtype=torch.long, device=x0.device)
    eps_pred = model(x_k, k - 1, token)
    x0_hat = reconstruct_x0(x_k, eps_pred, k - 1, schedule)
    # Clamped exactly like the sampler's estimate; entries already outside
    # the data box contribute no shape-term gradient instead of an amplified
    # one (at the last step the amplification exceeds 1000x and would drown
    # the noise-prediction objective).
    x0_shaped = x0_hat.clamp(-DENOISED_CLIP, DENOISED_CLIP)
    terms = {
        "noise": loss_noise(eps_pred, eps, token.mask),
        "boundary": loss_boundary(x0_shaped, token.current, token.goals, token.mask),
        "temporal": loss_temporal(x0_shaped, token.mask, weights.lambda_jerk),
        "collision": loss_collision(x0_shaped, token.mask, obstacles,
                                    weights.d_min, weights.d_obs),
    }
    w = weights.as_vector()
    total = (w[0] * terms["noise"] + w[1] * terms["boundary"]
             + w[2] * terms["temporal"] + w[3] * terms["collision"])
    breakdown = {name: float(value.detach()) for name, value in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ---------------------------------------------------------------------------
# Constrained sampling


@dataclass
class ConstraintSet:
    """Entry-level equality constraints applied at every reverse step."""

    mask: torch.Tensor     # (B, H, N, d) bool
    values: torch.Tensor   # (B, H, N, d)


def boundary_constraints(starts: torch.Tensor, subgoals: torch.Tensor,
                         active: torch.Tensor, horizon: int) -> ConstraintSet:
    """Pin the first timestep to the starts and the last to the subgoals."""
    B, N, d = starts.shape
    mask = torch.zeros(B, horizon, N, d, dtype=torch.bool, device=starts.device)
    values = torch.zeros(B, horizon, N, d, dtype=starts.dtype, device=starts.device)
    act = active[:, :, None]
    mask[:, 0] = act
    mask[:, -1] = act
    values[:, 0] = starts * act
    values[:, -1] = subgoals * act
    return ConstraintSet(mask=mask, values=values)


@torch.no_grad()
def sample(model: Denoiser, schedule: NoiseSchedule, token: ContextToken,
           constraints: ConstraintSet, generator: torch.Generator | None = None,
           callback=None,
           denoised_clip: float | None = DENOISED_CLIP) -> torch.Tensor:
    """Deterministic reverse diffusion with constraint overwriting.

    Starts from Gaussian noise, walks the array indices K-1 .. 1, and after
    every update (and on the initial state) overwrites constrained entries
    with their target values, so no intermediate state violates them. The
    optional ``callback(step_index, state)`` observes each state.

    ``denoised_clip`` clamps the per-step clean-signal estimate; without the
    clamp the update amplifies prediction error by
    sqrt(alpha_bar[t-1] / alpha_bar[t]) per step, which reaches ~30x on the
    clipped tail of short cosine schedules and diverges.
    """
    if constraints.mask.shape != constraints.values.shape:
        raise ValueError("constraint mask and values must share a shape")
    inactive = ~token.mask[:, None, :, None].expand_as(constraints.mask)
    if bool((constraints.mask & inactive).any()):
        raise ValueError("constraints touch inactive agent slots")
    was_training = model.training
    model.eval()
    try:
        x = torch.empty_like(constraints.values).normal_(generator=generator)
        x = torch.where(constraints.mask, constraints.values, x)
        if callback is not None:
            callback(schedule.steps - 1, x)
        for t in range(schedule.steps - 1, 0, -1):
            k = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
            eps_pred = model(x, k, token)
            x0_hat = reconstruct_x0(x, eps_pred, k, schedule)
            if denoised_clip is not None:
                x0_hat = x0_hat.clamp(-denoised_clip, denoised_clip)
                # Keep the update self-consistent with the clamped estimate:
                # re-derive the noise that explains x given clamp(x0_hat). A
                # no-op (up to roundoff) whenever the clamp does not bind.
                ab_t = _gather_alpha_bar(schedule, k, x)
                eps_pred = (x - torch.sqrt(ab_t) * x0_hat) / torch.sqrt(1.0 - ab_t)
            ab_prev = _gather_alpha_bar(schedule, k - 1, x)
            x = torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1.0 - ab_prev) * eps_pred
            x = torch.where(constraints.mask, constraints.values, x)
            if callback is not None:
                callback(t - 1, x)
        return x * token.mask[:, None, :, None].to(x.dtype)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# Training


def curriculum_agent_cap(epoch: int, n_max_train: int,
                         period: int | None = None) -> int:
    """Agents allowed at this epoch: one more every ``period`` epochs.

    ``period`` defaults to 1000 * n_max_train.
    """
    if period is None:
        period = 1000 * n_max_train
    if period < 1:
        raise ValueError("curriculum period must be positive")
    return min(n_max_train, 1 + epoch // period)


def batch_to_torch(batch: WindowBatch, device: str = "cpu"
                   ) -> tuple[torch.Tensor, ContextToken]:
    """Convert a sampled window batch into the training tensors."""
    x0 = torch.from_numpy(batch.windows).to(device)
    token = ContextToken(
        frames=torch.from_numpy(batch.frames).to(device),
        current=torch.from_numpy(batch.starts).to(device),
        goals=torch.from_numpy(batch.subgoals).to(device),
        mask=torch.from_numpy(batch.mask).to(device),
        n_agents=torch.from_numpy(batch.n_agents).to(device),
    )
    return x0, token


def normalized_geometry(manifest: Manifest, weights: LossWeights
                        ) -> tuple[LossWeights, torch.Tensor | None]:
    """Rescale clearances and obstacle centers into normalized coordinates."""
    scale = manifest.scale
    weights = dataclasses.replace(
        weights, d_min=weights.d_min / scale, d_obs=weights.d_obs / scale
    )
    centers = manifest.scenario.obstacle_centers()
    obstacles = None
    if len(centers):
        normed = (centers - manifest.center) / scale
        obstacles = torch.from_numpy(normed.astype(np.float32))
    return weights, obstacles


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_losses: dict


def save_checkpoint(path: str | Path, model: Denoiser, cfg: RunConfig,
                    manifest: Manifest, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    """Write the single-container checkpoint (versioned torch archive)."""
    path = Path(path)
    schedule = make_noise_schedule(cfg.diffusion)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": to_dict(cfg),
        "normalization": {
            "center": manifest.center.tolist(),
            "scale": manifest.scale,
        },
        "scenario": manifest.scenario.to_dict(),
        "schedule_betas": schedule.betas.tolist(),
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint; returns its payload with ``model`` reconstructed."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version}")
    from .config import run_config_from_dict

    cfg = run_config_from_dict(payload["config"])
    model = Denoiser(cfg.model)
    model.load_state_dict(payload["model_state"])
    model.eval()
    schedule = make_noise_schedule(cfg.diffusion)
    stored = np.asarray(payload["schedule_betas"])
    if not np.allclose(stored, schedule.betas):
        raise ValueError("stored schedule does not match the checkpoint config")
    payload["run_config"] = cfg
    payload["model"] = model
    payload["schedule"] = schedule
    return payload


def train(dataset_dir: str | Path, cfg: RunConfig, out_dir: str | Path,
          log_every: int = 0) -> TrainResult:
    """Train a denoiser on a collected dataset.

    Curriculum: epochs start with single-agent episodes and unlock one more
    agent per period. Batches are filtered so no episode exceeds the current
    cap. Gradients are clipped to unit global norm.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(dataset_dir)
    tcfg = cfg.train
    if max(manifest.counts) > tcfg.n_max_train:
        raise ValueError(
            f"dataset contains {max(manifest.counts)}-agent episodes, "
            f"config allows n_max_train={tcfg.n_max_train}"
        )
    if tcfg.n_max_train > cfg.model.n_max:
        raise ValueError("n_max_train cannot exceed the model's slot count")
    if manifest.frame_resolution != cfg.model.frame_resolution:
        raise ValueError(
            f"dataset frames are {manifest.frame_resolution}px, model expects "
            f"{cfg.model.frame_resolution}px"
        )

    torch.manual_seed(tcfg.seed)
    np_rng = np.random.default_rng(tcfg.seed)
    noise_gen = torch.Generator().manual_seed(tcfg.seed + 1)

    dataset = WindowDataset(manifest, cfg.model.n_max, cfg.model.horizon,
                            randomize_slots=tcfg.randomize_slots)
    model = Denoiser(cfg.model)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    schedule = make_noise_schedule(cfg.diffusion)
    weights, obstacles = normalized_geometry(manifest, cfg.loss)

    metrics_path = out_dir / "train_metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    final_losses: dict = {}
    with open(metrics_path, "w") as metrics_file:
        for epoch in range(tcfg.epochs):
            tic = time.perf_counter()
            n_curr = curriculum_agent_cap(epoch, tcfg.n_max_train,
                                          tcfg.curriculum_period)
            allowed = dataset.indices_with_at_most(n_curr)
            sums: dict[str, float] = {}
            grad_norms = []
            max_batch_agents = 0
            for _ in range(tcfg.batches_per_epoch):
                batch = dataset.sample(tcfg.batch_size, np_rng, allowed)
                max_batch_agents = max(max_batch_agents, int(batch.n_agents.max()))
                x0, token = batch_to_torch(batch)
                k = torch.randint(1, schedule.steps + 1, (x0.shape[0],),
                                  generator=noise_gen)
                loss, parts = total_loss(model, x0, token, k, weights,
                                         schedule, noise_gen, obstacles)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}: {parts}"
                    )
                optimizer.zero_grad()
                loss.backward()
                grad_norm = torch.nn.utils.clip_grad_norm_(
                    model.parameters(), tcfg.grad_clip
                )
                optimizer.step()
                grad_norms.append(float(grad_norm))
                for name, value in parts.items():
                    sums[name] = sums.get(name, 0.0) + value
            record = {
                "epoch": epoch,
                "n_curr": n_curr,
                "max_batch_agents": max_batch_agents,
                "grad_norm_mean": float(np.mean(grad_norms)),
                "seconds": time.perf_counter() - tic,
            }
            for name, value in sums.items():
                record[f"loss_{name}"] = value / tcfg.batches_per_epoch
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()
            final_losses = {k: v for k, v in record.items() if k.startswith("loss_")}
            if log_every and (epoch + 1) % log_every == 0:
                print(f"epoch {epoch + 1}/{tcfg.epochs} "
                      f"loss {record['loss_total']:.4f} n_curr {n_curr}")
            if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint-{epoch + 1:05d}.pt",
                                model, cfg, manifest, epoch + 1, optimizer)
    save_checkpoint(checkpoint_path, model, cfg, manifest, tcfg.epochs, optimizer)
    return TrainResult(checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path, final_losses=final_losses)
