"""Forward noising schedule and the deterministic reverse (DDIM-style) step.

The schedule arrays are kept in float64 and cast to the feature dtype at the
point of use, so the same schedule serves float32 training and float64
gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance schedule: betas, alphas = 1 - betas, and the
    cumulative signal-retention products alpha_bars."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def total_timesteps(self) -> int:
        return len(self.betas)

    def signal_coeff(self, t: int) -> float:
        """sqrt(alpha_bar_t), the weight on the clean feature at step t."""
        return math.sqrt(self._alpha_bar(t))

    def noise_coeff(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t), the weight on the noise at step t."""
        return math.sqrt(1.0 - self._alpha_bar(t))

    def _alpha_bar(self, t: int) -> float:
        if not 0 <= t < self.total_timesteps:
            raise IndexError(
                f"timestep {t} outside schedule range [0, {self.total_timesteps})"
            )
        return float(self.alpha_bars[t])


def build_schedule(
    total_timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced beta schedule with cumulative alpha products.

    Raises ValueError naming the offending parameter when bounds are invalid.
    """
    if total_timesteps < 1:
        raise ValueError(f"total_timesteps must be >= 1, got {total_timesteps}")
    if not 0.0 < beta_start < 1.0:
        raise ValueError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0.0 < beta_end < 1.0:
        raise ValueError(f"beta_end must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ValueError(
            f"beta_start must not exceed beta_end, got {beta_start} > {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, total_timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def add_noise(
    schedule: NoiseSchedule, z0: torch.Tensor, t: int, epsilon: torch.Tensor
) -> torch.Tensor:
    """Noise a clean feature to level t:
    sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * epsilon."""
    if epsilon.shape != z0.shape:
        raise ShapeError(
            f"epsilon shape {tuple(epsilon.shape)} != z0 shape {tuple(z0.shape)}"
        )
    return schedule.signal_coeff(t) * z0 + schedule.noise_coeff(t) * epsilon


@dataclass(frozen=True)
class SamplingPlan:
    """Descending timesteps at which the denoiser is evaluated during the
    reverse chain. The chain itself lands on the clean estimate at step 0;
    `trajectory` includes that terminal 0."""

    initial_timestep: int
    nfe: int
    timesteps: tuple[int, ...]
    interval: int
    sigma: float = field(default=0.0)

    @property
    def trajectory(self) -> tuple[int, ...]:
        return self.timesteps + (0,)

    def transitions(self):
        """(t, t_next) pairs for each reverse step; the last pair targets 0."""
        return list(zip(self.trajectory[:-1], self.trajectory[1:]))


def make_sampling_plan(
    schedule: NoiseSchedule, initial_timestep: int, nfe: int
) -> SamplingPlan:
    """Uniformly spaced reverse-chain plan from initial_timestep down to 0.

    nfe is the number of denoiser evaluations; the spacing is
    initial_timestep / nfe, floored to integers when not divisible.
    """
    T = schedule.total_timesteps
    if not 0 < initial_timestep < T:
        raise ValueError(
            f"initial_timestep must lie in (0, {T}), got {initial_timestep}"
        )
    if not 1 <= nfe <= initial_timestep:
        raise ValueError(
            f"nfe must lie in [1, initial_timestep={initial_timestep}], got {nfe}"
        )
    timesteps = tuple((nfe - i) * initial_timestep // nfe for i in range(nfe))
    return SamplingPlan(
        initial_timestep=initial_timestep,
        nfe=nfe,
        timesteps=timesteps,
        interval=initial_timestep // nfe,
    )


def ddim_step(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    predicted_noise: torch.Tensor,
    t: int,
    t_next: int,
) -> torch.Tensor:
    """One deterministic reverse step (zero transition variance).

    Recovers the clean estimate
        x0_hat = (z_t - sqrt(1 - alpha_bar_t) * predicted_noise) / sqrt(alpha_bar_t)
    and re-noises it to level t_next; t_next == 0 returns x0_hat itself.
    """
    if t_next >= t:
        raise ValueError(f"t_next must be < t, got t_next={t_next}, t={t}")
    if t_next < 0:
        raise ValueError(f"t_next must be >= 0, got {t_next}")
    if predicted_noise.shape != z_t.shape:
        raise ShapeError(
            f"predicted_noise shape {tuple(predicted_noise.shape)} != "
            f"z_t shape {tuple(z_t.shape)}"
        )
    x0_hat = (z_t - schedule.noise_coeff(t) * predicted_noise) / schedule.signal_coeff(t)
    if t_next == 0:
        return x0_hat
    return (
        schedule.signal_coeff(t_next) * x0_hat
        + schedule.noise_coeff(t_next) * predicted_noise
    )
