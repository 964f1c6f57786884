"""Distillation with diffusion-denoised student features.

A light diffusion model is trained on (optionally channel-compressed)
teacher features; student features are projected into the same space,
blended with Gaussian noise at a learned level, pushed through a short
deterministic reverse chain, and distilled against the teacher latent.
"""

from .adapters import (
    FeatureAdapters,
    LinearAutoencoder,
    NoiseAdapter,
    StudentProjection,
    blend_with_noise,
    match_noise,
)
from .core import (
    DiffKD,
    DiffKDConfig,
    HeadDefinition,
    LossBundle,
    denoise_student,
    diffkd_loss,
    diffusion_loss,
)
from .config import ExperimentConfig, HeadConfig, load_config
from .denoiser import (
    SpatialDenoiser,
    VectorDenoiser,
    build_denoiser,
    embed_timestep,
    predict_noise,
)
from .distances import (
    dist_correlation_distance,
    kl_divergence_distance,
    make_distance,
    mse_distance,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ShapeError,
    TrainingDiverged,
)
from .schedule import (
    NoiseSchedule,
    SamplingPlan,
    add_noise,
    build_schedule,
    ddim_step,
    make_sampling_plan,
)
from .viz import AttentionMap, attention_map, gamma_histogram

__all__ = [
    "AttentionMap",
    "CheckpointError",
    "ConfigError",
    "DiffKD",
    "DiffKDConfig",
    "ExperimentConfig",
    "FeatureAdapters",
    "HeadConfig",
    "HeadDefinition",
    "LinearAutoencoder",
    "LossBundle",
    "NoiseAdapter",
    "NoiseSchedule",
    "SamplingPlan",
    "ShapeError",
    "SpatialDenoiser",
    "StudentProjection",
    "TrainingDiverged",
    "VectorDenoiser",
    "add_noise",
    "attention_map",
    "blend_with_noise",
    "build_denoiser",
    "build_schedule",
    "ddim_step",
    "denoise_student",
    "diffkd_loss",
    "diffusion_loss",
    "dist_correlation_distance",
    "embed_timestep",
    "gamma_histogram",
    "kl_divergence_distance",
    "load_config",
    "make_distance",
    "make_sampling_plan",
    "match_noise",
    "mse_distance",
    "predict_noise",
]
