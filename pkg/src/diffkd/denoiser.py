"""Noise-prediction networks conditioned on the diffusion timestep.

Two variants share one interface `net(z_t, t) -> predicted noise`:

* spatial: two residual bottleneck blocks (1x1 reduce, 3x3, 1x1 expand) with
  group norm and SiLU, for rank-4 feature maps;
* vector: a two-layer MLP for rank-2 features such as logits.

The timestep enters through a sinusoidal embedding projected to a per-channel
scale and shift on the hidden activations. The output projection is
zero-initialized so a fresh network predicts zero noise.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def embed_timestep(
    t: int,
    dim: int,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> torch.Tensor:
    """Sinusoidal embedding of a timestep: dim/2 sines then dim/2 cosines over
    geometrically spaced frequencies. Deterministic in t."""
    if dim % 2 != 0:
        raise ValueError(f"dim must be even, got {dim}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float64, device=device)
        / half
    )
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)]).to(dtype)


def _group_count(channels: int) -> int:
    # keep at least two channels per group so every group has statistics
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class _FilmBottleneck(nn.Module):
    """Residual bottleneck with timestep scale/shift on the reduced width."""

    def __init__(self, channels: int, bottleneck: int, embed_dim: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, bottleneck, kernel_size=1)
        self.norm1 = nn.GroupNorm(_group_count(bottleneck), bottleneck)
        self.conv = nn.Conv2d(bottleneck, bottleneck, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(_group_count(bottleneck), bottleneck)
        self.expand = nn.Conv2d(bottleneck, channels, kernel_size=1)
        self.time_proj = nn.Linear(embed_dim, 2 * bottleneck)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.time_proj(emb).chunk(2, dim=-1)
        h = F.silu(self.norm1(self.reduce(x)))
        h = h * (1.0 + scale[None, :, None, None]) + shift[None, :, None, None]
        h = F.silu(self.norm2(self.conv(h)))
        return x + self.expand(h)


class SpatialDenoiser(nn.Module):
    """Noise predictor for rank-4 (N, C, H, W) features."""

    variant = "spatial"

    def __init__(
        self,
        in_channels: int,
        hidden_channels: int | None = None,
        timestep_embed_dim: int = 128,
        num_blocks: int = 2,
    ):
        super().__init__()
        self.in_channels = in_channels
        # bottleneck width: x4 reduction of the trunk unless overridden
        self.hidden_channels = hidden_channels or max(in_channels // 4, 1)
        self.timestep_embed_dim = timestep_embed_dim
        self.embed_proj = nn.Linear(timestep_embed_dim, timestep_embed_dim)
        self.blocks = nn.ModuleList(
            _FilmBottleneck(in_channels, self.hidden_channels, timestep_embed_dim)
            for _ in range(num_blocks)
        )
        self.out = nn.Conv2d(in_channels, in_channels, kernel_size=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z_t: torch.Tensor, t: int) -> torch.Tensor:
        if z_t.ndim != 4:
            raise ShapeError(
                f"spatial denoiser expects rank-4 input, got rank {z_t.ndim}"
            )
        if z_t.shape[1] != self.in_channels:
            raise ShapeError(
                f"spatial denoiser expects {self.in_channels} channels, "
                f"got {z_t.shape[1]}"
            )
        emb = F.silu(
            self.embed_proj(
                embed_timestep(
                    t, self.timestep_embed_dim, dtype=z_t.dtype, device=z_t.device
                )
            )
        )
        h = z_t
        for block in self.blocks:
            h = block(h, emb)
        return self.out(h)


class VectorDenoiser(nn.Module):
    """Noise predictor for rank-2 (N, C) features such as logits."""

    variant = "vector"

    def __init__(
        self,
        in_channels: int,
        hidden_channels: int | None = None,
        timestep_embed_dim: int = 128,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels or max(in_channels, 256)
        self.timestep_embed_dim = timestep_embed_dim
        self.embed_proj = nn.Linear(timestep_embed_dim, 2 * self.hidden_channels)
        self.fc_in = nn.Linear(in_channels, self.hidden_channels)
        self.fc_out = nn.Linear(self.hidden_channels, in_channels)
        nn.init.zeros_(self.fc_out.weight)
        nn.init.zeros_(self.fc_out.bias)

    def forward(self, z_t: torch.Tensor, t: int) -> torch.Tensor:
        if z_t.ndim != 2:
            raise ShapeError(
                f"vector denoiser expects rank-2 input, got rank {z_t.ndim}"
            )
        if z_t.shape[1] != self.in_channels:
            raise ShapeError(
                f"vector denoiser expects {self.in_channels} features, "
                f"got {z_t.shape[1]}"
            )
        emb = embed_timestep(
            t, self.timestep_embed_dim, dtype=z_t.dtype, device=z_t.device
        )
        scale, shift = self.embed_proj(emb).chunk(2, dim=-1)
        h = F.silu(self.fc_in(z_t))
        h = h * (1.0 + scale[None, :]) + shift[None, :]
        return self.fc_out(h)


def build_denoiser(
    variant: str,
    in_channels: int,
    hidden_channels: int | None = None,
    timestep_embed_dim: int = 128,
) -> nn.Module:
    if variant == "spatial":
        return SpatialDenoiser(in_channels, hidden_channels, timestep_embed_dim)
    if variant == "vector":
        return VectorDenoiser(in_channels, hidden_channels, timestep_embed_dim)
    raise ValueError(f"unknown denoiser variant {variant!r}")


def predict_noise(denoiser: nn.Module, z_t: torch.Tensor, t: int) -> torch.Tensor:
    """Run the noise predictor; output shape always equals input shape."""
    return denoiser(z_t, t)
