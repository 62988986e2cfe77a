"""1-D convolutional U-Net over the time axis of embedded windows.

Agent slots are folded into channels: the (B, H, N, D) embedding becomes a
(B, N*D, H) sequence, so the contract that inactive slots carry exact zeros
(enforced again here) is what keeps them out of the convolution mixing.
Each level applies FiLM right after its first convolution's normalization.
Blocks are residual, so a normalization-free linear path runs from input
to head and the predicted noise can track the input's amplitude. The
horizon pads up to a multiple of 2**depth with edge replication and the
output crops back.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .axial import make_encoder
from .config import ModelConfig
from .context import ContextEncoder, ContextToken, EncodedContext, film_modulate


def _make_norm(kind: str, channels: int, groups: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm1d(channels)
    if kind == "group":
        return nn.GroupNorm(math.gcd(groups, channels), channels)
    raise ValueError(f"unknown norm kind {kind!r}")


class ConvBlock(nn.Module):
    """Two 3-wide convolutions with normalization; FiLM after the first.

    Residual: the input rides a parallel path (1x1 projection when the
    widths differ) past both normalizations. Noise prediction needs the
    raw input amplitude at the output — at high step indices the target
    is nearly the input itself — and a purely normalized stack cannot
    carry it.
    """

    def __init__(self, c_in: int, c_out: int, norm: str, groups: int):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = _make_norm(norm, c_out, groups)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = _make_norm(norm, c_out, groups)
        self.shortcut = (nn.Identity() if c_in == c_out
                         else nn.Conv1d(c_in, c_out, 1))
        self.width = c_out

    def forward(self, x: torch.Tensor,
                film: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
        h = self.norm1(self.conv1(x))
        h = F.relu(film_modulate(h, film[0], film[1]))
        return self.shortcut(x) + self.norm2(self.conv2(h))


class TemporalUNet(nn.Module):
    def __init__(self, n_max: int = 8, embed_dim: int = 64, state_dim: int = 2,
                 base_width: int = 128, depth: int = 2, norm: str = "batch",
                 groups: int = 8):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be at least 1")
        self.n_max = n_max
        self.embed_dim = embed_dim
        self.state_dim = state_dim
        self.depth = depth

        down_widths = [base_width * (2**i) for i in range(depth)]
        c_in = n_max * embed_dim
        self.downs = nn.ModuleList()
        for w in down_widths:
            self.downs.append(ConvBlock(c_in, w, norm, groups))
            c_in = w
        self.middle = ConvBlock(down_widths[-1], down_widths[-1], norm, groups)
        self.ups = nn.ModuleList()
        c_prev = down_widths[-1]
        for i in reversed(range(depth)):
            c_out = down_widths[i - 1] if i > 0 else base_width
            self.ups.append(ConvBlock(c_prev + down_widths[i], c_out, norm, groups))
            c_prev = c_out
        self.head = nn.Conv1d(c_prev, n_max * state_dim, 1)
        # Zero-initialized head: the fresh model predicts zero noise, so
        # early training is driven by the objective, not by init noise.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.pool = nn.MaxPool1d(2)

    @property
    def film_widths(self) -> list[int]:
        blocks = list(self.downs) + [self.middle] + list(self.ups)
        return [b.width for b in blocks]

    def forward(self, embedded: torch.Tensor, ctx: EncodedContext,
                mask: torch.Tensor, disable_skips: bool = False) -> torch.Tensor:
        """Predict per-slot noise (B, H, N, state_dim) from embeddings.

        ``disable_skips`` zeroes the skip connections; diagnostic only.
        """
        B, H, N, D = embedded.shape
        if N != self.n_max or D != self.embed_dim:
            raise ValueError(
                f"embedding shape {(N, D)} does not match model "
                f"{(self.n_max, self.embed_dim)}"
            )
        films = ctx.films
        if len(films) != len(self.film_widths):
            raise ValueError(
                f"{len(films)} FiLM levels supplied, U-Net has {len(self.film_widths)}"
            )
        slot = mask.to(embedded.dtype)[:, None, :, None]
        embedded = embedded * slot

        h = embedded.permute(0, 2, 3, 1).reshape(B, N * D, H)
        pad = (-H) % (2**self.depth)
        if pad:
            h = F.pad(h, (0, pad), mode="replicate")

        films = list(films)
        skips = []
        for block in self.downs:
            h = block(h, films.pop(0))
            skips.append(h)
            h = self.pool(h)
        h = self.middle(h, films.pop(0))
        for block in self.ups:
            skip = skips.pop()
            if disable_skips:
                skip = torch.zeros_like(skip)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), films.pop(0))
        out = self.head(h)[:, :, :H]
        out = out.reshape(B, N, self.state_dim, H).permute(0, 3, 1, 2)
        return out * slot


class Denoiser(nn.Module):
    """Full noise predictor: trajectory encoder, context encoder, U-Net."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = make_encoder(
            cfg.encoder,
            state_dim=cfg.state_dim,
            embed_dim=cfg.embed_dim,
            n_max=cfg.n_max,
            max_horizon=cfg.horizon,
            num_heads=cfg.num_heads,
            mlp_hidden=cfg.mlp_hidden,
        )
        self.unet = TemporalUNet(
            n_max=cfg.n_max,
            embed_dim=cfg.embed_dim,
            state_dim=cfg.state_dim,
            base_width=cfg.unet_base_width,
            depth=cfg.unet_depth,
            norm=cfg.norm,
            groups=cfg.group_norm_groups,
        )
        self.context = ContextEncoder(
            n_max=cfg.n_max,
            context_dim=cfg.context_dim,
            time_embed_dim=cfg.time_embed_dim,
            frame_resolution=cfg.frame_resolution,
            film_widths=self.unet.film_widths,
            num_heads=cfg.num_heads,
        )

    def forward(self, x_k: torch.Tensor, k: torch.Tensor,
                token: ContextToken) -> torch.Tensor:
        """Noise prediction for noisy windows x_k at step indices k (B,)."""
        if not torch.is_tensor(k):
            k = torch.as_tensor(k, device=x_k.device)
        if k.dim() == 0:
            k = k.expand(x_k.shape[0])
        ctx = self.context(token, k)
        embedded = self.encoder(x_k, token.mask)
        return self.unet(embedded, ctx, token.mask)
