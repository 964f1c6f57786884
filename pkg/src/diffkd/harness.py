"""End-to-end training and evaluation: teacher provisioning, optimization of
the combined objective, newline-delimited metrics logging, checkpointing
with resume, and seed-controlled determinism.

One optimizer covers every trainable module (student, projections, noise
adapters, denoisers, autoencoders); the frozen teacher is hashed before and
after the run to prove it never changed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .core import DiffKD, HeadDefinition, LossBundle
from .data import DatasetSplit, augment_crop_flip, iterate_batches, load_dataset
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .models import build_model

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class MetricRecord:
    step: int
    epoch: int
    losses: dict[str, float]
    gamma_stats: dict | None = None
    eval: dict[str, float] | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "MetricRecord":
        return MetricRecord(**json.loads(line))


def gamma_statistics(gammas: torch.Tensor, bins: int = 10) -> dict:
    hist = torch.histc(gammas.float(), bins=bins, min=0.0, max=1.0)
    return {
        "mean": float(gammas.mean()),
        "min": float(gammas.min()),
        "max": float(gammas.max()),
        "buckets": [int(c) for c in hist],
    }


def weights_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def head_definitions(cfg: ExperimentConfig, teacher: nn.Module) -> list[HeadDefinition]:
    defs = []
    for head in cfg.heads:
        if head.feature_tap not in teacher.feature_info:
            raise ConfigError(
                f"feature_tap {head.feature_tap!r} not exposed by "
                f"{cfg.teacher_arch}; taps: {sorted(teacher.feature_info)}"
            )
        variant, _ = teacher.feature_info[head.feature_tap]
        defs.append(
            HeadDefinition(
                feature_tap=head.feature_tap,
                variant=variant,
                use_autoencoder=head.use_autoencoder,
                latent_channels=head.latent_channels,
                distance=head.distance,
            )
        )
    return defs


def build_state(cfg: ExperimentConfig, teacher: nn.Module, student: nn.Module) -> DiffKD:
    teacher_channels = {k: c for k, (_, c) in teacher.feature_info.items()}
    student_channels = {k: c for k, (_, c) in student.feature_info.items()}
    return DiffKD(cfg.diffkd, head_definitions(cfg, teacher), teacher_channels, student_channels)


def _build_optimizer(cfg: ExperimentConfig, params):
    opt = cfg.optimizer
    if opt.kind == "sgd":
        return torch.optim.SGD(
            params, lr=opt.lr, momentum=opt.momentum, weight_decay=opt.weight_decay
        )
    if opt.kind == "adam":
        return torch.optim.Adam(params, lr=opt.lr, weight_decay=opt.weight_decay)
    raise ConfigError(f"unknown optimizer kind {opt.kind!r}")


def _lr_at(cfg: ExperimentConfig, epoch: int) -> float:
    sched = cfg.lr_schedule
    base = cfg.optimizer.lr
    if sched.kind == "multistep":
        drops = sum(1 for m in sched.milestones if epoch >= m)
        return base * (sched.gamma ** drops)
    if sched.kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
    if sched.kind == "constant":
        return base
    raise ConfigError(f"unknown lr schedule kind {sched.kind!r}")


def check_finite(bundle: LossBundle, step: int, log_path: Path | None):
    """Abort with a diagnostic record when any component is non-finite."""
    floats = bundle.to_floats()
    if all(math.isfinite(v) for v in floats.values()):
        return
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"diverged_at_step": step, "losses": floats}) + "\n")
    raise TrainingDiverged(f"non-finite loss at step {step}: {floats}")


@torch.no_grad()
def evaluate_model(model: nn.Module, split: DatasetSplit, batch_size: int = 256) -> dict:
    model.eval()
    top1 = top5 = total = 0
    for images, labels in iterate_batches(split, batch_size, shuffle=False):
        logits = model(images)
        k = min(5, logits.shape[1])
        topk = logits.topk(k, dim=1).indices
        top1 += int((topk[:, 0] == labels).sum())
        top5 += int((topk == labels[:, None]).any(dim=1).sum())
        total += len(labels)
    return {"top1": 100.0 * top1 / total, "top5": 100.0 * top5 / total}


def save_model_checkpoint(path: str | Path, model: nn.Module, arch: str,
                          num_classes: int, eval_metrics: dict | None = None):
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "model",
            "arch": arch,
            "num_classes": num_classes,
            "model_state": model.state_dict(),
            "eval": eval_metrics,
        },
        path,
    )


def load_model_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "model":
        raise CheckpointError(f"{path} is not a plain model checkpoint")
    model = build_model(payload["arch"], payload["num_classes"])
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"architecture mismatch loading {path}: {exc}") from exc
    model.eval()
    return model, payload


def train_teacher(cfg: ExperimentConfig, out_path: str | Path) -> Path:
    """Train the teacher on the task alone and freeze it into a checkpoint."""
    teacher_cfg = dataclasses.replace(
        cfg,
        student_arch=cfg.teacher_arch,
        teacher_checkpoint="",
        heads=[],
        diffkd=dataclasses.replace(
            cfg.diffkd, lambda_diff=0.0, lambda_ae=0.0, lambda_kd=0.0
        ),
    )
    out_path = Path(out_path)
    result = train(teacher_cfg, run_dir=out_path.parent / "teacher_run", teacher=None)
    model, _ = load_experiment_student(result.checkpoint_path)
    save_model_checkpoint(
        out_path, model, cfg.teacher_arch, cfg.num_classes, result.final_record.eval
    )
    return out_path


@dataclass
class TrainResult:
    final_record: MetricRecord
    checkpoint_path: Path
    metrics_path: Path
    teacher_hash: str | None


def _provision_teacher(cfg: ExperimentConfig, run_dir: Path) -> nn.Module | None:
    if not cfg.heads and not cfg.teacher_checkpoint:
        return None
    if cfg.teacher_checkpoint:
        teacher, payload = load_model_checkpoint(cfg.teacher_checkpoint)
        if payload["arch"] != cfg.teacher_arch:
            raise CheckpointError(
                f"teacher checkpoint arch {payload['arch']!r} does not match "
                f"config teacher_arch {cfg.teacher_arch!r}"
            )
        return teacher
    path = train_teacher(cfg, run_dir / "teacher.pt")
    teacher, _ = load_model_checkpoint(path)
    return teacher


def train(
    cfg: ExperimentConfig,
    run_dir: str | Path = "runs/run",
    resume_from: str | Path | None = None,
    teacher: nn.Module | str | Path | None = "auto",
) -> TrainResult:
    """Run the full training loop; returns the final record and checkpoint.

    `teacher` may be a module, a checkpoint path, None (task-only training),
    or "auto" to resolve from the config (training one from scratch when the
    config names no checkpoint).
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.ndjson"

    torch.manual_seed(cfg.seed)
    student = build_model(cfg.student_arch, cfg.num_classes)

    teacher_path = cfg.teacher_checkpoint
    if teacher == "auto":
        teacher = _provision_teacher(cfg, run_dir)
        if teacher is not None and not teacher_path:
            teacher_path = str(run_dir / "teacher.pt")
    elif isinstance(teacher, (str, Path)):
        teacher_path = str(teacher)
        teacher, _ = load_model_checkpoint(teacher)
    if teacher is not None:
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
    teacher_hash = weights_hash(teacher) if teacher is not None else None

    state = None
    if cfg.heads:
        if teacher is None:
            raise ConfigError("heads configured but no teacher available")
        torch.manual_seed(cfg.seed + 1)
        state = build_state(cfg, teacher, student)

    params = list(student.parameters()) + (
        list(state.parameters()) if state is not None else []
    )
    optimizer = _build_optimizer(cfg, params)

    g_data = torch.Generator().manual_seed(cfg.seed + 1013)
    g_diff = torch.Generator().manual_seed(cfg.seed + 2027)

    start_epoch, step = 0, 0
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        if payload.get("kind") != "experiment":
            raise CheckpointError(f"{resume_from} is not an experiment checkpoint")
        student.load_state_dict(payload["student_state"])
        if state is not None and payload.get("state_state"):
            state.load_state_dict(payload["state_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        g_data.set_state(payload["rng"]["data"])
        g_diff.set_state(payload["rng"]["diff"])
        torch.set_rng_state(payload["rng"]["torch"])
        start_epoch = payload["epoch"] + 1
        step = payload["step"]
        metrics_path = run_dir / "metrics.ndjson"

    train_split, eval_split = load_dataset(cfg)
    if metrics_path.exists() and resume_from is None:
        metrics_path.unlink()

    final_record = None
    for epoch in range(start_epoch, cfg.epochs):
        lr = _lr_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        student.train()
        if state is not None:
            state.train()
        for images, labels in iterate_batches(train_split, cfg.batch_size, g_data):
            if cfg.augment:
                images = augment_crop_flip(images, g_data)
            step += 1
            student_outputs = student.forward_features(images)
            task_loss = F.cross_entropy(student_outputs["logits"], labels)
            if state is not None:
                with torch.no_grad():
                    teacher_outputs = teacher.forward_features(images)
                bundle, gammas = state.compute_losses(
                    task_loss, teacher_outputs, student_outputs, g_diff
                )
            else:
                zero = task_loss.detach() * 0.0
                bundle = LossBundle.build(task_loss, zero, zero, zero, cfg.diffkd)
                gammas = None
            check_finite(bundle, step, metrics_path)
            optimizer.zero_grad()
            bundle.total.backward()
            optimizer.step()
            if step % cfg.log_interval == 0:
                record = MetricRecord(
                    step=step,
                    epoch=epoch,
                    losses=bundle.to_floats(),
                    gamma_stats=gamma_statistics(gammas) if gammas is not None else None,
                )
                with open(metrics_path, "a") as fh:
                    fh.write(record.to_json() + "\n")
        eval_metrics = evaluate_model(student, eval_split)
        final_record = MetricRecord(
            step=step,
            epoch=epoch,
            losses=bundle.to_floats(),
            gamma_stats=gamma_statistics(gammas) if gammas is not None else None,
            eval=eval_metrics,
        )
        with open(metrics_path, "a") as fh:
            fh.write(final_record.to_json() + "\n")

        checkpoint_path = run_dir / "checkpoint.pt"
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "kind": "experiment",
                "config": config_to_dict(cfg),
                "student_state": student.state_dict(),
                "state_state": state.state_dict() if state is not None else None,
                "optimizer_state": optimizer.state_dict(),
                "rng": {
                    "data": g_data.get_state(),
                    "diff": g_diff.get_state(),
                    "torch": torch.get_rng_state(),
                },
                "epoch": epoch,
                "step": step,
                "teacher_hash": teacher_hash,
                "teacher_checkpoint": teacher_path,
                "eval": eval_metrics,
            },
            checkpoint_path,
        )

    if teacher is not None and weights_hash(teacher) != teacher_hash:
        raise RuntimeError("teacher weights changed during training")
    return TrainResult(
        final_record=final_record,
        checkpoint_path=run_dir / "checkpoint.pt",
        metrics_path=metrics_path,
        teacher_hash=teacher_hash,
    )


def load_experiment_student(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "experiment":
        raise CheckpointError(f"{path} is not an experiment checkpoint")
    cfg = config_from_dict_lenient(payload["config"])
    student = build_model(cfg.student_arch, cfg.num_classes)
    try:
        student.load_state_dict(payload["student_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"architecture mismatch loading {path}: {exc}") from exc
    student.eval()
    return student, payload


def config_from_dict_lenient(data: dict) -> ExperimentConfig:
    """Rebuild a config snapshot from a checkpoint without re-checking paths
    (the teacher checkpoint may have moved since the run)."""
    data = dict(data)
    data["teacher_checkpoint"] = ""
    return config_from_dict(data)


def evaluate(checkpoint: str | Path, eval_split: DatasetSplit | None = None) -> dict:
    """Top-1/top-5 accuracy of a checkpointed model over the eval stream."""
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") == "model":
        model, payload = load_model_checkpoint(path)
        cfg = None
    else:
        model, payload = load_experiment_student(path)
        cfg = config_from_dict_lenient(payload["config"])
    if eval_split is None:
        if cfg is None:
            raise CheckpointError(
                "plain model checkpoints need an explicit eval split"
            )
        _, eval_split = load_dataset(cfg)
    return evaluate_model(model, eval_split)
