"""Scene context encoding and FiLM conditioning.

The conditioning set per window is: the rendered scene frame, current and
goal positions of the active agents, and the active-agent count. Each
modality gets its own encoder; a single attention block fuses the three
modality tokens into one context vector. Per-level FiLM heads then map
[context vector, diffusion-step embedding] to channel-wise scales and
shifts for the U-Net, starting from exact identity modulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class ContextToken:
    """Batched conditioning inputs; padded slots are ignored via the mask."""

    frames: torch.Tensor     # (B, res, res, 3) uint8 or float in [0, 1]
    current: torch.Tensor    # (B, N, 2) normalized positions at window start
    goals: torch.Tensor      # (B, N, 2) normalized window-end targets
    mask: torch.Tensor       # (B, N) bool
    n_agents: torch.Tensor   # (B,) long


@dataclass
class EncodedContext:
    vector: torch.Tensor                              # (B, C) fused context
    films: list[tuple[torch.Tensor, torch.Tensor]]    # per level: (B, W) scale, shift
    k: torch.Tensor                                   # (B,) diffusion step index


def time_embedding(k: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of diffusion step indices, shape (B, dim).

    The first half holds sines, the second half cosines, over geometrically
    spaced frequencies from 1 down to 1/max_period. k = 0 therefore maps to
    zeros and ones, and every embedding has norm sqrt(dim / 2).
    """
    if dim % 2 != 0:
        raise ValueError("time embedding width must be even")
    half = dim // 2
    k = k.to(torch.get_default_dtype() if not k.is_floating_point() else k.dtype)
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=k.dtype, device=k.device) / half
    )
    angles = k[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def film_modulate(features: torch.Tensor, scale: torch.Tensor,
                  shift: torch.Tensor) -> torch.Tensor:
    """Channel-wise affine modulation of (B, C, L) features by (B, C) params."""
    return features * scale[:, :, None] + shift[:, :, None]


class ContextEncoder(nn.Module):
    """Fuses frame, agent poses, and agent count into FiLM parameters."""

    def __init__(self, n_max: int = 8, context_dim: int = 128,
                 time_embed_dim: int = 64, frame_resolution: int = 64,
                 film_widths: list[int] | None = None, num_heads: int = 4):
        super().__init__()
        if frame_resolution % 8 != 0:
            raise ValueError("frame_resolution must be divisible by 8")
        self.n_max = n_max
        self.context_dim = context_dim
        self.time_embed_dim = time_embed_dim
        self.frame_resolution = frame_resolution

        channels = [3, 16, 32, 64]
        stages = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            stages += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
        self.frame_conv = nn.Sequential(*stages)
        self.frame_head = nn.Linear(channels[-1], context_dim)

        self.pose_mlp = nn.Sequential(
            nn.Linear(4, context_dim),
            nn.ReLU(),
            nn.Linear(context_dim, context_dim),
        )
        # Small init keeps rows for counts never seen in training (deployment
        # above n_max_train) from drowning the frame and pose tokens.
        self.count_embed = nn.Embedding(n_max + 1, context_dim)
        nn.init.normal_(self.count_embed.weight, std=0.02)
        self.fuse_attn = nn.MultiheadAttention(context_dim, num_heads, batch_first=True)

        self.film_widths = list(film_widths or [])
        heads = []
        for width in self.film_widths:
            head = nn.Linear(context_dim + time_embed_dim, 2 * width)
            # Zero init: scale = 1 + 0, shift = 0, identity until trained.
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            heads.append(head)
        self.film_heads = nn.ModuleList(heads)

    def encode_modalities(self, token: ContextToken) -> torch.Tensor:
        """Fused context vector (B, C), independent of the diffusion step."""
        frames, mask = token.frames, token.mask
        if frames.shape[1] != self.frame_resolution:
            raise ValueError(
                f"frame resolution {frames.shape[1]} != model {self.frame_resolution}"
            )
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every batch element needs at least one active agent")
        if frames.dtype == torch.uint8:
            frames = frames.to(self.frame_head.weight.dtype) / 255.0
        img = frames.permute(0, 3, 1, 2)
        feat = self.frame_conv(img).mean(dim=(2, 3))        # global average pool
        img_tok = self.frame_head(feat)                     # (B, C)

        slot = mask.to(img_tok.dtype)[:, :, None]
        poses = torch.cat([token.current, token.goals], dim=-1) * slot
        pose_feat = self.pose_mlp(poses) * slot             # (B, N, C)
        denom = slot.sum(dim=1).clamp(min=1.0)
        pose_tok = pose_feat.sum(dim=1) / denom             # masked mean

        count_tok = self.count_embed(token.n_agents)

        tokens = torch.stack([img_tok, pose_tok, count_tok], dim=1)   # (B, 3, C)
        fused, _ = self.fuse_attn(tokens, tokens, tokens, need_weights=False)
        return fused.mean(dim=1)

    def film_params(self, vector: torch.Tensor,
                    k: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        temb = time_embedding(k, self.time_embed_dim).to(vector.dtype)
        joint = torch.cat([vector, temb], dim=-1)
        films = []
        for head, width in zip(self.film_heads, self.film_widths):
            raw = head(joint)
            films.append((1.0 + raw[:, :width], raw[:, width:]))
        return films

    def forward(self, token: ContextToken, k: torch.Tensor) -> EncodedContext:
        if k.dim() == 0:
            k = k.expand(token.mask.shape[0])
        vector = self.encode_modalities(token)
        return EncodedContext(vector=vector, films=self.film_params(vector, k), k=k)
