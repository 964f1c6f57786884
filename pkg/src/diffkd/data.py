"""Dataset loading: CIFAR-10/100 from a local torchvision root (with a
download attempt and a hint when absent), or a synthetic Gaussian-mixture
image set for fully offline runs. Batching and augmentation are driven by
explicit generators so runs are reproducible bit-for-bit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig, SyntheticConfig

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class DatasetSplit:
    """In-memory split: images (N, C, H, W) float32, labels (N,) int64."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self):
        return len(self.labels)


def _balanced_subset(labels: torch.Tensor, size: int, num_classes: int,
                     generator: torch.Generator) -> torch.Tensor:
    """Indices of a class-balanced subset, deterministic under the generator."""
    per_class, remainder = divmod(size, num_classes)
    order = torch.randperm(len(labels), generator=generator)
    picked = []
    for c in range(num_classes):
        want = per_class + (1 if c < remainder else 0)
        candidates = order[labels[order] == c]
        if len(candidates) < want:
            raise ValueError(
                f"class {c} has only {len(candidates)} samples, need {want}"
            )
        picked.append(candidates[:want])
    return torch.cat(picked)


def _load_cifar(cfg: ExperimentConfig):
    import torchvision

    cls = {
        "cifar10": torchvision.datasets.CIFAR10,
        "cifar100": torchvision.datasets.CIFAR100,
    }[cfg.dataset]
    splits = []
    for train in (True, False):
        try:
            ds = cls(root=cfg.data_root, train=train, download=False)
        except (RuntimeError, FileNotFoundError):
            try:
                ds = cls(root=cfg.data_root, train=train, download=True)
            except Exception as exc:
                raise IOError(
                    f"{cfg.dataset} not found under {cfg.data_root!r} and the "
                    f"download failed ({exc}); fetch the dataset into "
                    f"{cfg.data_root!r} or use dataset = \"synthetic\""
                ) from exc
        images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
        mean = torch.tensor(CIFAR_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(CIFAR_STD).view(1, 3, 1, 1)
        images = (images - mean) / std
        labels = torch.tensor(ds.targets, dtype=torch.int64)
        splits.append((images, labels))
    num_classes = 10 if cfg.dataset == "cifar10" else 100
    return splits, num_classes


def _class_modes(syn: SyntheticConfig, generator: torch.Generator) -> torch.Tensor:
    """Smooth per-class mean patterns, closed under horizontal flip.

    Low-resolution Gaussian fields are upsampled to the image size; each
    base mode contributes itself and its mirror so flip augmentation does
    not fight the class signal. Shape: (classes, modes, C, H, W)."""
    size = syn.image_size
    low = max(size // 8, 2)
    base = torch.randn(
        syn.classes, syn.modes_per_class, syn.channels, low, low,
        generator=generator,
    )
    smooth = F.interpolate(
        base.view(-1, syn.channels, low, low),
        size=(size, size),
        mode="bilinear",
        align_corners=False,
    ).view(syn.classes, syn.modes_per_class, syn.channels, size, size)
    smooth = smooth / smooth.std(dim=(2, 3, 4), keepdim=True) * syn.signal_scale
    return torch.cat([smooth, smooth.flip(-1)], dim=1)


def _synthetic_split(
    syn: SyntheticConfig, modes: torch.Tensor, size: int, generator: torch.Generator
) -> DatasetSplit:
    per_class, remainder = divmod(size, syn.classes)
    labels = torch.cat(
        [
            torch.full((per_class + (1 if c < remainder else 0),), c, dtype=torch.int64)
            for c in range(syn.classes)
        ]
    )
    labels = labels[torch.randperm(len(labels), generator=generator)]
    mode_idx = torch.randint(0, modes.shape[1], (len(labels),), generator=generator)
    noise = torch.randn(
        len(labels), syn.channels, syn.image_size, syn.image_size,
        generator=generator,
    )
    images = modes[labels, mode_idx] + syn.noise_std * noise
    return DatasetSplit(images=images, labels=labels, num_classes=syn.classes)


def load_dataset(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    """(train split, eval split) for the configured dataset, deterministic
    under cfg.seed."""
    generator = torch.Generator().manual_seed(cfg.seed + 7919)
    if cfg.dataset == "synthetic":
        modes = _class_modes(cfg.synthetic, generator)
        train = _synthetic_split(cfg.synthetic, modes, cfg.synthetic.train_size, generator)
        eval_ = _synthetic_split(cfg.synthetic, modes, cfg.synthetic.eval_size, generator)
    else:
        (train_raw, eval_raw), num_classes = _load_cifar(cfg)
        train = DatasetSplit(*train_raw, num_classes)
        eval_ = DatasetSplit(*eval_raw, num_classes)
    if cfg.subset_size is not None:
        idx = _balanced_subset(train.labels, cfg.subset_size, train.num_classes, generator)
        train = DatasetSplit(train.images[idx], train.labels[idx], train.num_classes)
    return train, eval_


def augment_crop_flip(
    images: torch.Tensor, generator: torch.Generator, pad: int = 4
) -> torch.Tensor:
    """Random crop after zero padding plus random horizontal flip, batched,
    with all randomness drawn from the given generator."""
    n, _, h, w = images.shape
    padded = F.pad(images, (pad, pad, pad, pad))
    ys = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    xs = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(images)
    for i in range(n):
        crop = padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def iterate_batches(
    split: DatasetSplit,
    batch_size: int,
    generator: torch.Generator | None = None,
    shuffle: bool = True,
):
    """Yield (images, labels) batches; shuffling is generator-driven."""
    n = len(split)
    order = (
        torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    )
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield split.images[idx], split.labels[idx]
