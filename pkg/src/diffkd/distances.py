"""Pluggable distances for distillation losses: MSE, temperature-scaled KL
divergence, and an optional correlation distance (inter-class over rows plus
intra-class over the batch)."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DISTANCE_KINDS = ("mse", "kl", "dist")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(
            f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def mse_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of (a - b)^2."""
    _check_same_shape(a, b, "mse_distance")
    return ((a - b) ** 2).mean()


def kl_divergence_distance(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T)), scaled by T^2
    so gradients stay comparable across temperatures."""
    _check_same_shape(student_logits, teacher_logits, "kl_divergence_distance")
    if student_logits.ndim != 2:
        raise ShapeError(
            f"kl_divergence_distance expects rank-2 logits, got rank "
            f"{student_logits.ndim}"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    log_q = F.log_softmax(student_logits / temperature, dim=1)
    log_p = F.log_softmax(teacher_logits / temperature, dim=1)
    kl = F.kl_div(log_q, log_p, reduction="batchmean", log_target=True)
    return kl * (temperature * temperature)


def _standardize_rows(x: torch.Tensor) -> torch.Tensor:
    """Zero-mean unit-std per row; zero-variance rows map to zero rows."""
    centered = x - x.mean(dim=1, keepdim=True)
    std = centered.std(dim=1, unbiased=False, keepdim=True)
    # zero-variance rows have centered == 0, so the clamp keeps them at 0
    return centered / std.clamp_min(1e-12)


def _pearson_per_row(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise Pearson correlation; rows with zero variance contribute 0."""
    ac = a - a.mean(dim=1, keepdim=True)
    bc = b - b.mean(dim=1, keepdim=True)
    num = (ac * bc).sum(dim=1)
    denom = ac.norm(dim=1) * bc.norm(dim=1)
    return num / denom.clamp_min(1e-12)

def correlation_terms(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(inter, intra) terms, each 1 - mean Pearson correlation.

    Rows are standardized first, making both terms invariant to positive
    per-row affine transforms of either argument. inter correlates each
    sample's row across classes; intra correlates each class's column across
    the batch.
    """
    _check_same_shape(student_logits, teacher_logits, "correlation distance")
    if student_logits.ndim != 2:
        raise ShapeError(
            f"correlation distance expects rank-2 logits, got rank "
            f"{student_logits.ndim}"
        )
    s = _standardize_rows(student_logits)
    t = _standardize_rows(teacher_logits)
    inter = 1.0 - _pearson_per_row(s, t).mean()
    intra = 1.0 - _pearson_per_row(s.T, t.T).mean()
    return inter, intra


def dist_correlation_distance(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor
) -> torch.Tensor:
    """Mean of the inter- and intra-correlation terms; 0 when the inputs
    agree up to positive per-row affine transforms."""
    inter, intra = correlation_terms(student_logits, teacher_logits)
    return (inter + intra) / 2.0


def make_distance(kind: str, temperature: float = 1.0):
    """Resolve a distance name to a callable d(student, teacher)."""
    if kind == "mse":
        return mse_distance
    if kind == "kl":
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        return lambda s, t: kl_divergence_distance(s, t, temperature)
    if kind == "dist":
        return dist_correlation_distance
    raise ConfigError(
        f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}"
    )
