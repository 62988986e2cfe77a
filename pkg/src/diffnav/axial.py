"""Trajectory embedding: axial attention over agents then time, plus a
linear baseline used by the ablation grid.

Input windows are (B, H, N, d) with inactive slots zeroed and a boolean
(B, N) mask. Attention over the agent axis runs per timestep (sequence
length N, batch B*H) with inactive slots excluded from the keys; attention
over the time axis runs per agent slot (sequence length H, batch B*N).
Normalization is pre-norm throughout: each sublayer reads a LayerNorm of
the stream and adds its result back, so the projected input itself rides
the residual stream unnormalized into the downstream network (noise
prediction needs its amplitude). Outputs at inactive slots are exactly
zero, which downstream channel folding relies on.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def count_parameters(module: nn.Module) -> int:
    """Number of trainable parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def _check_inputs(x: torch.Tensor, mask: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected (B, H, N, d) input, got shape {tuple(x.shape)}")
    if mask.shape != (x.shape[0], x.shape[2]):
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match batch/slots "
            f"{(x.shape[0], x.shape[2])}"
        )
    if not bool(mask.any(dim=1).all()):
        raise ValueError("every batch element needs at least one active agent slot")


class AxialEncoder(nn.Module):
    """Per-slot linear projection, learned slot/time positions, axial attention."""

    def __init__(self, state_dim: int = 2, embed_dim: int = 64, n_max: int = 8,
                 max_horizon: int = 16, num_heads: int = 4, mlp_hidden: int = 256):
        super().__init__()
        self.n_max = n_max
        self.max_horizon = max_horizon
        self.embed_dim = embed_dim
        self.input_proj = nn.Linear(state_dim, embed_dim)
        self.agent_pos = nn.Parameter(torch.randn(n_max, embed_dim) * 0.02)
        self.time_pos = nn.Parameter(torch.randn(max_horizon, embed_dim) * 0.02)
        self.agent_attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)
        self.time_attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)
        self.norm_agent = nn.LayerNorm(embed_dim)
        self.norm_time = nn.LayerNorm(embed_dim)
        self.norm_mlp = nn.LayerNorm(embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, mlp_hidden),
            nn.GELU(),
            nn.Linear(mlp_hidden, embed_dim),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Embed (B, H, N, d) windows to (B, H, N, D); inactive slots are zero."""
        _check_inputs(x, mask)
        B, H, N, _ = x.shape
        if N != self.n_max:
            raise ValueError(f"got {N} agent slots, model built for {self.n_max}")
        if H > self.max_horizon:
            raise ValueError(f"horizon {H} exceeds max_horizon {self.max_horizon}")
        slot = mask.to(x.dtype)[:, None, :, None]            # (B, 1, N, 1)
        x = x * slot
        x_pos = self.input_proj(x)
        x_pos = x_pos + self.agent_pos[None, None, :, :] + self.time_pos[None, :H, None, :]

        # Agent axis: one sequence of N slots per (batch, timestep).
        agent_in = self.norm_agent(x_pos).reshape(B * H, N, self.embed_dim)
        pad = (~mask).repeat_interleave(H, dim=0)            # (B*H, N), True = drop
        attn_agent, _ = self.agent_attn(agent_in, agent_in, agent_in,
                                        key_padding_mask=pad, need_weights=False)
        x_a = x_pos + attn_agent.reshape(B, H, N, self.embed_dim)

        # Time axis: one sequence of H steps per (batch, slot).
        time_in = self.norm_time(x_a).permute(0, 2, 1, 3)
        time_in = time_in.reshape(B * N, H, self.embed_dim)
        attn_time, _ = self.time_attn(time_in, time_in, time_in, need_weights=False)
        attn_time = attn_time.reshape(B, N, H, self.embed_dim).permute(0, 2, 1, 3)
        x_at = x_a + attn_time

        out = x_at + self.mlp(self.norm_mlp(x_at))
        return out * slot


class LinearEncoder(nn.Module):
    """Ablation baseline: the same per-slot projection with no interaction."""

    def __init__(self, state_dim: int = 2, embed_dim: int = 64, n_max: int = 8,
                 max_horizon: int = 16, **_unused):
        super().__init__()
        self.n_max = n_max
        self.max_horizon = max_horizon
        self.embed_dim = embed_dim
        self.input_proj = nn.Linear(state_dim, embed_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        _check_inputs(x, mask)
        if x.shape[2] != self.n_max:
            raise ValueError(f"got {x.shape[2]} agent slots, model built for {self.n_max}")
        if x.shape[1] > self.max_horizon:
            raise ValueError(f"horizon {x.shape[1]} exceeds max_horizon {self.max_horizon}")
        slot = mask.to(x.dtype)[:, None, :, None]
        return self.input_proj(x * slot) * slot


def make_encoder(kind: str, **kwargs) -> nn.Module:
    if kind == "axial":
        return AxialEncoder(**kwargs)
    if kind == "linear":
        return LinearEncoder(**kwargs)
    raise ValueError(f"unknown encoder kind {kind!r}")
