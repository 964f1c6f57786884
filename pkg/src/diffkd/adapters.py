"""Auxiliary networks around the denoiser: the linear autoencoder that
compresses teacher features, the projection that maps student features into
the teacher latent space, and the noise-matching module that blends the
projected student feature with Gaussian noise via a learned per-sample
weight gamma in (0, 1).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

# sigmoid(+-GAMMA_LOGIT_BOUND) stays strictly inside (0, 1) in float32
GAMMA_LOGIT_BOUND = 12.0


class LinearAutoencoder(nn.Module):
    """Affine channel compression: a 1x1 conv encoder and a 1x1 conv decoder,
    no nonlinearity. Trained by reconstruction only; `encode` detaches its
    output so downstream losses never reach the encoder."""

    def __init__(self, in_channels: int, latent_channels: int, identity_init: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.encoder = nn.Conv2d(in_channels, latent_channels, kernel_size=1)
        self.decoder = nn.Conv2d(latent_channels, in_channels, kernel_size=1)
        if identity_init:
            if in_channels != latent_channels:
                raise ValueError(
                    "identity_init requires latent_channels == in_channels"
                )
            for conv in (self.encoder, self.decoder):
                nn.init.zeros_(conv.bias)
                with torch.no_grad():
                    conv.weight.copy_(
                        torch.eye(in_channels).view(in_channels, in_channels, 1, 1)
                    )

    def _check(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"autoencoder expects rank-4 input with {self.in_channels} "
                f"channels, got shape {tuple(x.shape)}"
            )

    def encode(self, teacher_feature: torch.Tensor) -> torch.Tensor:
        """Latent with latent_channels channels, spatial dims unchanged,
        detached from the encoder graph."""
        self._check(teacher_feature)
        return self.encoder(teacher_feature).detach()

    def reconstruction_loss(self, teacher_feature: torch.Tensor) -> torch.Tensor:
        """MSE of decode(encode(x)) against x; reaches both encoder and
        decoder parameters."""
        self._check(teacher_feature)
        recon = self.decoder(self.encoder(teacher_feature))
        return F.mse_loss(recon, teacher_feature)


class StudentProjection(nn.Module):
    """One linear channel map from student feature space into the teacher
    latent space: 1x1 conv for spatial features, plain linear for vectors.
    Square maps start as the identity so logits keep their class alignment."""

    def __init__(self, in_channels: int, out_channels: int, variant: str = "spatial"):
        super().__init__()
        if variant not in ("spatial", "vector"):
            raise ValueError(f"unknown projection variant {variant!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.variant = variant
        if variant == "spatial":
            self.map = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        else:
            self.map = nn.Linear(in_channels, out_channels)
        if in_channels == out_channels:
            nn.init.zeros_(self.map.bias)
            with torch.no_grad():
                eye = torch.eye(in_channels)
                self.map.weight.copy_(
                    eye.view(in_channels, in_channels, 1, 1) if variant == "spatial" else eye
                )

    def forward(self, student_feature: torch.Tensor) -> torch.Tensor:
        expected_rank = 4 if self.variant == "spatial" else 2
        if student_feature.ndim != expected_rank:
            raise ShapeError(
                f"student projection ({self.variant}) expects rank-{expected_rank} "
                f"input, got rank {student_feature.ndim}"
            )
        if student_feature.shape[1] != self.in_channels:
            raise ShapeError(
                f"student projection expects {self.in_channels} channels, "
                f"got {student_feature.shape[1]}"
            )
        return self.map(student_feature)


class NoiseAdapter(nn.Module):
    """Per-sample noise weight gamma in (0, 1): a 3x3 conv trunk, global
    average pooling, one linear head, and a sigmoid (linear trunk for the
    vector variant). The pre-sigmoid logit is bounded so gamma never
    saturates to exactly 0 or 1."""

    def __init__(self, channels: int, variant: str = "spatial"):
        super().__init__()
        if variant not in ("spatial", "vector"):
            raise ValueError(f"unknown noise adapter variant {variant!r}")
        self.channels = channels
        self.variant = variant
        if variant == "spatial":
            self.trunk = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        else:
            self.trunk = nn.Linear(channels, channels)
        self.head = nn.Linear(channels, 1)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        expected_rank = 4 if self.variant == "spatial" else 2
        if latent.ndim != expected_rank or latent.shape[1] != self.channels:
            raise ShapeError(
                f"noise adapter ({self.variant}) expects rank-{expected_rank} input "
                f"with {self.channels} channels, got shape {tuple(latent.shape)}"
            )
        h = self.trunk(latent)
        if self.variant == "spatial":
            h = h.mean(dim=(2, 3))
        logit = self.head(h).clamp(-GAMMA_LOGIT_BOUND, GAMMA_LOGIT_BOUND)
        return torch.sigmoid(logit).squeeze(1)


def blend_with_noise(
    student_latent: torch.Tensor, epsilon: torch.Tensor, gamma: torch.Tensor
) -> torch.Tensor:
    """gamma * latent + (1 - gamma) * epsilon, gamma broadcast per sample."""
    g = gamma.view(gamma.shape[0], *([1] * (student_latent.ndim - 1)))
    return g * student_latent + (1.0 - g) * epsilon


def match_noise(
    adapter: NoiseAdapter,
    student_latent: torch.Tensor,
    epsilon_T: torch.Tensor,
    gamma_override: torch.Tensor | float | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend the student latent with noise at the learned per-sample level.

    Returns (blended latent, gamma per sample). gamma_override bypasses the
    adapter, e.g. to pin gamma to an endpoint.
    """
    if epsilon_T.shape != student_latent.shape:
        raise ShapeError(
            f"noise matching: epsilon shape {tuple(epsilon_T.shape)} != "
            f"student latent shape {tuple(student_latent.shape)}"
        )
    if gamma_override is None:
        gamma = adapter(student_latent)
    elif isinstance(gamma_override, torch.Tensor):
        gamma = gamma_override
    else:
        gamma = torch.full(
            (student_latent.shape[0],),
            float(gamma_override),
            dtype=student_latent.dtype,
            device=student_latent.device,
        )
    return blend_with_noise(student_latent, epsilon_T, gamma), gamma


class FeatureAdapters(nn.Module):
    """The adapter trio owned by one distillation head: student projection,
    noise adapter, and (feature heads only) the teacher autoencoder."""

    def __init__(
        self,
        projection: StudentProjection,
        noise_adapter: NoiseAdapter | None,
        autoencoder: LinearAutoencoder | None = None,
    ):
        super().__init__()
        self.projection = projection
        self.noise_adapter = noise_adapter
        self.autoencoder = autoencoder
