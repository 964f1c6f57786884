"""Figure generation: spatial saliency maps of feature tensors and gamma
statistics read from a metrics log. Every plot also writes its numeric table;
the numbers are the contract, the images are best-effort."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch


@dataclass(frozen=True)
class AttentionMap:
    """Saliency over (H, W): H*W * softmax(channel mean / tau); entries are
    non-negative and sum to H*W."""

    values: np.ndarray
    tau: float


def attention_map(feature, tau: float = 0.5) -> AttentionMap:
    """Channel-mean softmax saliency of a rank-3 (C, H, W) feature map.

    Lower tau sharpens the map toward the most active pixel.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if isinstance(feature, torch.Tensor):
        feature = feature.detach().cpu().numpy()
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3:
        raise ValueError(f"expected rank-3 (C, H, W) feature, got rank {feature.ndim}")
    _, h, w = feature.shape
    x = feature.mean(axis=0).reshape(-1) / tau
    e = np.exp(x - x.max())
    # multiply before dividing: a constant input yields exactly 1.0 per cell
    values = (h * w * e) / e.sum()
    return AttentionMap(values=values.reshape(h, w), tau=tau)


def save_attention_map(amap: AttentionMap, out_base: str | Path) -> dict[str, Path]:
    """Write <base>.png and <base>.csv; returns both paths."""
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_base.with_suffix(".csv")
    np.savetxt(csv_path, amap.values, delimiter=",")
    png_path = out_base.with_suffix(".png")
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(amap.values, cmap="viridis")
    ax.set_title(f"tau={amap.tau}")
    fig.colorbar(im, ax=ax)
    fig.savefig(png_path, bbox_inches="tight")
    plt.close(fig)
    return {"png": png_path, "csv": csv_path}


def read_gamma_records(metrics_path: str | Path) -> list[dict]:
    records = []
    with open(metrics_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("gamma_stats"):
                records.append(rec)
    return records


def gamma_histogram(
    metrics_path: str | Path, out_dir: str | Path, bins: int = 10
) -> dict:
    """Aggregate gamma buckets and the per-epoch mean-gamma curve from a
    metrics log; writes histogram and curve images plus CSV tables.

    Returns {"buckets": ..., "epoch_means": ..., "paths": {...}}.
    """
    records = read_gamma_records(metrics_path)
    if not records:
        raise ValueError(f"no gamma records found in {metrics_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    buckets = np.zeros(bins, dtype=np.int64)
    for rec in records:
        counts = rec["gamma_stats"]["buckets"]
        if len(counts) != bins:
            raise ValueError(
                f"log buckets have {len(counts)} bins, expected {bins}"
            )
        buckets += np.asarray(counts, dtype=np.int64)

    by_epoch: dict[int, list[float]] = {}
    for rec in records:
        by_epoch.setdefault(rec["epoch"], []).append(rec["gamma_stats"]["mean"])
    epochs = sorted(by_epoch)
    epoch_means = [float(np.mean(by_epoch[e])) for e in epochs]

    edges = np.linspace(0.0, 1.0, bins + 1)
    buckets_csv = out_dir / "gamma_buckets.csv"
    with open(buckets_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bucket_low", "bucket_high", "count"])
        for i, count in enumerate(buckets):
            writer.writerow([edges[i], edges[i + 1], int(count)])

    curve_csv = out_dir / "gamma_epoch_mean.csv"
    with open(curve_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_gamma"])
        for e, m in zip(epochs, epoch_means):
            writer.writerow([e, m])

    hist_png = out_dir / "gamma_histogram.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(edges[:-1], buckets, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_xlabel("gamma")
    ax.set_ylabel("count")
    fig.savefig(hist_png, bbox_inches="tight")
    plt.close(fig)

    curve_png = out_dir / "gamma_epoch_mean.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, epoch_means, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean gamma")
    fig.savefig(curve_png, bbox_inches="tight")
    plt.close(fig)

    return {
        "buckets": buckets.tolist(),
        "bucket_edges": edges.tolist(),
        "epoch_means": dict(zip(epochs, epoch_means)),
        "paths": {
            "histogram_png": hist_png,
            "buckets_csv": buckets_csv,
            "curve_png": curve_png,
            "curve_csv": curve_csv,
        },
    }
