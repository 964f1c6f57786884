"""Command-line entry points: training, evaluation, ablation sweeps over the
denoising-step count and autoencoder width, and feature-saliency
visualization. Errors print one `error: ...` line; usage problems exit 2,
runtime failures exit 1."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import torch

from .config import ExperimentConfig, load_config
from .core import denoise_student
from .harness import (
    build_state,
    evaluate,
    load_model_checkpoint,
    train,
    train_teacher,
)
from .models import build_model
from .viz import attention_map, gamma_histogram, save_attention_map


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffkd",
        description="Distillation with diffusion-denoised student features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("config", help="TOML experiment config")
    p_train.add_argument("--run-dir", default="runs/train")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--resume", default=None, help="experiment checkpoint to resume")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")

    p_ablate = sub.add_parser("ablate", help="sweep one factor across runs")
    p_ablate.add_argument("target", choices=["nfe", "ae-dim"])
    p_ablate.add_argument("config", help="TOML experiment config")
    p_ablate.add_argument("--values", required=True, help="comma-separated integers")
    p_ablate.add_argument("--run-dir", default="runs/ablate")

    p_viz = sub.add_parser("visualize", help="feature saliency maps")
    p_viz.add_argument("checkpoint")
    p_viz.add_argument(
        "--input",
        required=True,
        help="image file or 'eval[:index]' for an eval-set sample",
    )
    p_viz.add_argument("--tau", type=float, default=0.5)
    p_viz.add_argument("--out", default="runs/visualize")
    return parser


def _require_config(path: str) -> ExperimentConfig:
    if not Path(path).exists():
        raise UsageError(f"config not found: {path}")
    return load_config(path)


class UsageError(Exception):
    pass


def _cmd_train(args) -> int:
    cfg = _require_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    result = train(cfg, run_dir=args.run_dir, resume_from=args.resume)
    rec = result.final_record
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    if rec.eval:
        print(f"top1: {rec.eval['top1']:.2f}")
        print(f"top5: {rec.eval['top5']:.2f}")
    if rec.gamma_stats is not None:
        paths = gamma_histogram(result.metrics_path, Path(args.run_dir) / "figures")
        print(f"gamma figures: {paths['paths']['histogram_png'].parent}")
    return 0


def _cmd_eval(args) -> int:
    metrics = evaluate(args.checkpoint)
    print(f"top1: {metrics['top1']:.2f}")
    print(f"top5: {metrics['top5']:.2f}")
    return 0


def _shared_teacher(cfg: ExperimentConfig, run_dir: Path) -> str:
    if cfg.teacher_checkpoint:
        return cfg.teacher_checkpoint
    path = run_dir / "teacher.pt"
    if not path.exists():
        train_teacher(cfg, path)
    return str(path)


def _cmd_ablate(args) -> int:
    cfg = _require_config(args.config)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated integers: {exc}")
    if not values:
        raise UsageError("--values is empty")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    teacher_ckpt = _shared_teacher(cfg, run_dir)

    rows = []
    for value in values:
        variant = dataclasses.replace(cfg, teacher_checkpoint=teacher_ckpt)
        if args.target == "nfe":
            variant.diffkd = dataclasses.replace(cfg.diffkd, nfe=value)
        else:
            ae_heads = [h for h in cfg.heads if h.use_autoencoder]
            if not ae_heads:
                raise UsageError("ae-dim sweep needs a head with use_autoencoder")
            variant.heads = [
                dataclasses.replace(
                    h, latent_channels=value if h.use_autoencoder else h.latent_channels
                )
                for h in cfg.heads
            ]
        result = train(variant, run_dir=run_dir / f"{args.target}_{value}")
        rows.append((value, result.final_record.eval["top1"], result.final_record.eval["top5"]))

    table_path = run_dir / f"ablate_{args.target}.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.target, "top1", "top5"])
        writer.writerows(rows)
    print(f"{args.target:>8}  {'top1':>6}  {'top5':>6}")
    for value, top1, top5 in rows:
        print(f"{value:>8}  {top1:>6.2f}  {top5:>6.2f}")
    print(f"table: {table_path}")
    return 0


def _load_visual_input(spec: str, cfg: ExperimentConfig) -> torch.Tensor:
    if spec.startswith("eval"):
        from .data import load_dataset

        index = int(spec.split(":", 1)[1]) if ":" in spec else 0
        _, eval_split = load_dataset(cfg)
        if not 0 <= index < len(eval_split):
            raise UsageError(f"eval index {index} outside [0, {len(eval_split)})")
        return eval_split.images[index : index + 1]
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"input not found: {spec}")
    import matplotlib.image as mpimg

    arr = mpimg.imread(path)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    tensor = torch.from_numpy(arr[:, :, :3].copy()).float().permute(2, 0, 1)
    if tensor.max() > 1.5:
        tensor = tensor / 255.0
    return tensor[None]


def _cmd_visualize(args) -> int:
    from .harness import config_from_dict_lenient, load_experiment_student

    student, payload = load_experiment_student(args.checkpoint)
    cfg = config_from_dict_lenient(payload["config"])
    images = _load_visual_input(args.input, cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    with torch.no_grad():
        student_outputs = student.forward_features(images)
    spatial_taps = [
        tap for tap, value in student_outputs.items() if value.ndim == 4
    ]
    if not spatial_taps:
        raise UsageError("student exposes no spatial feature tap to visualize")
    tap = spatial_taps[0]
    written.append(
        save_attention_map(
            attention_map(student_outputs[tap][0], args.tau), out_dir / "student"
        )
    )

    teacher_ckpt = payload.get("teacher_checkpoint")
    if teacher_ckpt and Path(teacher_ckpt).exists():
        teacher, _ = load_model_checkpoint(teacher_ckpt)
        with torch.no_grad():
            teacher_outputs = teacher.forward_features(images)
        written.append(
            save_attention_map(
                attention_map(teacher_outputs[tap][0], args.tau), out_dir / "teacher"
            )
        )

    if payload.get("state_state") and cfg.heads:
        # only tap shapes are needed to rebuild the heads, not teacher weights
        shape_ref = build_model(cfg.teacher_arch, cfg.num_classes)
        state = build_state(cfg, shape_ref, student)
        state.load_state_dict(payload["state_state"])
        state.eval()
        if tap in state.heads:
            head = state.heads[tap]
            rng = torch.Generator().manual_seed(cfg.seed)
            with torch.no_grad():
                denoised, _ = denoise_student(
                    state.schedule,
                    state.plan,
                    head.denoiser,
                    head.adapters,
                    student_outputs[tap],
                    rng,
                )
            written.append(
                save_attention_map(
                    attention_map(denoised[0], args.tau), out_dir / "denoised"
                )
            )

    for paths in written:
        print(f"wrote {paths['png']} and {paths['csv']}")
    return 0


def cli(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "visualize": _cmd_visualize,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI failure boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli())
