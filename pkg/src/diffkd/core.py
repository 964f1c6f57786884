"""Composition of schedule, denoiser, and adapters into the distillation
procedure: train the diffusion model on (detached) teacher latents, denoise
the noise-matched student latent through the deterministic reverse chain,
and assemble the weighted training objective

    total = task + lambda_diff * diff + lambda_ae * ae + lambda_kd * diffkd.

By default the denoiser is updated only by the diffusion loss: inside the
reverse chain its parameters are treated as constants, so the distillation
gradient reaches the student, projection, and noise adapter but cannot bend
the denoiser toward the distillation target. `train_denoiser_on_kd` flips
that behavior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .adapters import FeatureAdapters, match_noise
from .distances import make_distance
from .errors import ConfigError
from .schedule import NoiseSchedule, SamplingPlan, add_noise, ddim_step

FORMAT_DEFAULT_TOTAL_TIMESTEPS = 1000
FORMAT_DEFAULT_INITIAL_TIMESTEP = 500
FORMAT_DEFAULT_NFE = 5


@dataclass
class DiffKDConfig:
    """Weights and sampling settings for the distillation objective."""

    lambda_diff: float = 1.0
    lambda_ae: float = 1.0
    lambda_kd: float = 1.0
    total_timesteps: int = FORMAT_DEFAULT_TOTAL_TIMESTEPS
    beta_start: float = 1e-4
    beta_end: float = 0.02
    initial_timestep: int = FORMAT_DEFAULT_INITIAL_TIMESTEP
    nfe: int = FORMAT_DEFAULT_NFE
    use_autoencoder: bool = False
    distance: str = "mse"
    temperature: float = 1.0
    denoise: bool = True
    train_denoiser_on_kd: bool = False

    def validate(self):
        for name in ("lambda_diff", "lambda_ae", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBundle:
    """The four loss components and their weighted sum. `total` is always
    accumulated in float64 so the weighted-sum identity holds to 1e-9."""

    task: torch.Tensor
    diff: torch.Tensor
    ae: torch.Tensor
    diffkd: torch.Tensor
    total: torch.Tensor

    @staticmethod
    def build(
        task: torch.Tensor,
        diff: torch.Tensor,
        ae: torch.Tensor,
        diffkd: torch.Tensor,
        config: DiffKDConfig,
    ) -> "LossBundle":
        total = (
            task.double()
            + config.lambda_diff * diff.double()
            + config.lambda_ae * ae.double()
            + config.lambda_kd * diffkd.double()
        )
        return LossBundle(task=task, diff=diff, ae=ae, diffkd=diffkd, total=total)

    def to_floats(self) -> dict[str, float]:
        return {
            "task": float(self.task.detach()),
            "diff": float(self.diff.detach()),
            "ae": float(self.ae.detach()),
            "diffkd": float(self.diffkd.detach()),
            "total": float(self.total.detach()),
        }


def diffusion_loss(
    schedule: NoiseSchedule,
    denoiser: nn.Module,
    teacher_latent: torch.Tensor,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction MSE at a uniformly sampled timestep; the latent is
    detached so only denoiser parameters receive gradient."""
    z0 = teacher_latent.detach()
    t = int(torch.randint(0, schedule.total_timesteps, (1,), generator=rng))
    epsilon = torch.empty_like(z0).normal_(generator=rng)
    z_t = add_noise(schedule, z0, t, epsilon)
    predicted = denoiser(z_t, t)
    return ((predicted - epsilon) ** 2).mean()


def _constant_params_call(denoiser: nn.Module):
    """Forward function whose graph treats denoiser parameters as constants
    while staying differentiable with respect to the input."""
    frozen = {k: v.detach() for k, v in denoiser.named_parameters()}
    frozen.update(dict(denoiser.named_buffers()))

    def fwd(z_t, t):
        return torch.func.functional_call(denoiser, frozen, (z_t, t))

    return fwd


def denoise_student(
    schedule: NoiseSchedule,
    plan: SamplingPlan,
    denoiser: nn.Module,
    adapters: FeatureAdapters,
    student_feature: torch.Tensor,
    rng: torch.Generator,
    train_denoiser: bool = False,
    gamma_override: torch.Tensor | float | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Project the student feature, blend it with fresh Gaussian noise at the
    learned level, and run the reverse chain from the plan's initial timestep.

    Returns (denoised latent, gamma per sample). The chain is differentiable
    back to the student and the noise adapter.
    """
    z = adapters.projection(student_feature)
    epsilon_T = torch.empty_like(z).normal_(generator=rng)
    z_t, gamma = match_noise(adapters.noise_adapter, z, epsilon_T, gamma_override)
    fwd = denoiser if train_denoiser else _constant_params_call(denoiser)
    for t, t_next in plan.transitions():
        predicted = fwd(z_t, t)
        z_t = ddim_step(schedule, z_t, predicted, t, t_next)
    return z_t, gamma


def diffkd_loss(
    denoised_student: torch.Tensor,
    teacher_latent: torch.Tensor,
    distance: str = "mse",
    temperature: float = 1.0,
) -> torch.Tensor:
    """Distance between the denoised student latent and the (detached)
    teacher latent."""
    d = make_distance(distance, temperature)
    return d(denoised_student, teacher_latent.detach())


@dataclass
class HeadDefinition:
    """One distillation head: which tap it reads and how it is built."""

    feature_tap: str
    variant: str  # spatial | vector
    use_autoencoder: bool = False
    latent_channels: int = 0
    distance: str = "mse"


@dataclass
class HeadResult:
    diff: torch.Tensor
    ae: torch.Tensor
    diffkd: torch.Tensor
    gamma: torch.Tensor | None


class DiffKDHead(nn.Module):
    """Denoiser + adapters for one feature tap."""

    def __init__(
        self,
        definition: HeadDefinition,
        teacher_channels: int,
        student_channels: int,
        config: DiffKDConfig,
    ):
        super().__init__()
        from .adapters import LinearAutoencoder, NoiseAdapter, StudentProjection
        from .denoiser import build_denoiser

        self.definition = definition
        self.config = config
        variant = definition.variant
        autoencoder = None
        latent_channels = teacher_channels
        if definition.use_autoencoder:
            if variant != "spatial":
                raise ConfigError(
                    f"head {definition.feature_tap!r}: the autoencoder applies "
                    "to spatial features only"
                )
            if definition.latent_channels <= 0:
                raise ConfigError(
                    f"head {definition.feature_tap!r}: latent_channels must be "
                    "set when use_autoencoder is true"
                )
            latent_channels = definition.latent_channels
            autoencoder = LinearAutoencoder(teacher_channels, latent_channels)
        self.latent_channels = latent_channels
        projection = StudentProjection(student_channels, latent_channels, variant)
        noise_adapter = (
            NoiseAdapter(latent_channels, variant) if config.denoise else None
        )
        self.adapters = FeatureAdapters(projection, noise_adapter, autoencoder)
        self.denoiser = (
            build_denoiser(variant, latent_channels) if config.denoise else None
        )

    def target_latent(self, teacher_feature: torch.Tensor) -> torch.Tensor:
        """The distillation target: the autoencoder latent when present,
        otherwise the teacher feature itself; detached in both cases."""
        if self.adapters.autoencoder is not None:
            return self.adapters.autoencoder.encode(teacher_feature)
        return teacher_feature.detach()

    def compute(
        self,
        teacher_feature: torch.Tensor,
        student_feature: torch.Tensor,
        schedule: NoiseSchedule,
        plan: SamplingPlan,
        rng: torch.Generator,
    ) -> HeadResult:
        cfg = self.config
        zero = torch.zeros((), dtype=student_feature.dtype, device=student_feature.device)
        target = self.target_latent(teacher_feature)

        ae = zero
        if self.adapters.autoencoder is not None and cfg.lambda_ae > 0:
            ae = self.adapters.autoencoder.reconstruction_loss(teacher_feature.detach())

        diff = zero
        if cfg.denoise and cfg.lambda_diff > 0:
            diff = diffusion_loss(schedule, self.denoiser, target, rng)

        kd = zero
        gamma = None
        if cfg.lambda_kd > 0:
            if cfg.denoise:
                denoised, gamma = denoise_student(
                    schedule,
                    plan,
                    self.denoiser,
                    self.adapters,
                    student_feature,
                    rng,
                    train_denoiser=cfg.train_denoiser_on_kd,
                )
            else:
                denoised = self.adapters.projection(student_feature)
            kd = diffkd_loss(
                denoised, target, self.definition.distance, cfg.temperature
            )
        return HeadResult(diff=diff, ae=ae, diffkd=kd, gamma=gamma)


class DiffKD(nn.Module):
    """All distillation heads plus the shared schedule and sampling plan.

    Owned by a single training loop; loss computation and optimizer steps are
    serialized per instance.
    """

    def __init__(
        self,
        config: DiffKDConfig,
        head_definitions: list[HeadDefinition],
        teacher_channels: dict[str, int],
        student_channels: dict[str, int],
    ):
        super().__init__()
        from .schedule import build_schedule, make_sampling_plan

        config.validate()
        self.config = config
        self.schedule = build_schedule(
            config.total_timesteps, config.beta_start, config.beta_end
        )
        self.plan = make_sampling_plan(
            self.schedule, config.initial_timestep, config.nfe
        )
        self.heads = nn.ModuleDict()
        for definition in head_definitions:
            tap = definition.feature_tap
            if tap not in teacher_channels or tap not in student_channels:
                raise ConfigError(
                    f"head tap {tap!r} not among model taps "
                    f"{sorted(teacher_channels)}"
                )
            self.heads[tap] = DiffKDHead(
                definition, teacher_channels[tap], student_channels[tap], config
            )

    def compute_losses(
        self,
        task_loss: torch.Tensor,
        teacher_outputs: dict[str, torch.Tensor],
        student_outputs: dict[str, torch.Tensor],
        rng: torch.Generator,
    ) -> tuple[LossBundle, torch.Tensor | None]:
        """Sum per-head components, weight them, and add the task loss.

        Returns the bundle plus the concatenated per-sample gamma values
        (None when no head ran the noise-matched chain).
        """
        cfg = self.config
        zero = task_loss.detach() * 0.0
        diff, ae, kd = zero, zero, zero
        gammas = []
        for tap, head in self.heads.items():
            if tap not in teacher_outputs or tap not in student_outputs:
                raise ConfigError(
                    f"head tap {tap!r} missing from model outputs "
                    f"{sorted(teacher_outputs)}"
                )
            result = head.compute(
                teacher_outputs[tap],
                student_outputs[tap],
                self.schedule,
                self.plan,
                rng,
            )
            diff = diff + result.diff
            ae = ae + result.ae
            kd = kd + result.diffkd
            if result.gamma is not None:
                gammas.append(result.gamma.detach())
        bundle = LossBundle.build(task_loss, diff, ae, kd, cfg)
        return bundle, (torch.cat(gammas) if gammas else None)
