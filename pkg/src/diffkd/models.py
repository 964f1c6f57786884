"""Classifier architectures for desk-scale experiments.

Every model exposes `forward_features(x)` returning the tap dictionary
{"backbone": pre-pool feature map, "logits": class scores} and a matching
`feature_info` describing each tap as (variant, channels), which is what the
distillation heads are built from.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


class _BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """3-stage residual network for 32x32 inputs (widths 16/32/64)."""

    def __init__(self, blocks_per_stage: int, num_classes: int = 10, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_planes = width
        for i, planes in enumerate((width, 2 * width, 4 * width)):
            for j in range(blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                stages.append(_BasicBlock(in_planes, planes, stride))
                in_planes = planes
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_planes, num_classes)
        self.feature_channels = in_planes
        self.num_classes = num_classes

    @property
    def feature_info(self) -> dict[str, tuple[str, int]]:
        return {
            "backbone": ("spatial", self.feature_channels),
            "logits": ("vector", self.num_classes),
        }

    def forward_features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feat = self.stages(self.stem(x))
        logits = self.head(feat.mean(dim=(2, 3)))
        return {"backbone": feat, "logits": logits}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)["logits"]


class TinyConvNet(nn.Module):
    """Two-conv classifier used for fast tests and smoke runs."""

    def __init__(self, num_classes: int = 10, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, 2, 1)
        self.conv2 = nn.Conv2d(width, width, 3, 2, 1)
        self.head = nn.Linear(width, num_classes)
        self.feature_channels = width
        self.num_classes = num_classes

    @property
    def feature_info(self) -> dict[str, tuple[str, int]]:
        return {
            "backbone": ("spatial", self.feature_channels),
            "logits": ("vector", self.num_classes),
        }

    def forward_features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        logits = self.head(h.mean(dim=(2, 3)))
        return {"backbone": h, "logits": logits}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)["logits"]


_ARCHITECTURES = {
    "resnet8": lambda classes: CifarResNet(1, classes),
    "resnet20": lambda classes: CifarResNet(3, classes),
    "resnet56": lambda classes: CifarResNet(9, classes),
    "tinyconv": lambda classes: TinyConvNet(classes),
}


def build_model(arch: str, num_classes: int) -> nn.Module:
    if arch not in _ARCHITECTURES:
        raise ConfigError(
            f"unknown architecture {arch!r}; expected one of "
            f"{sorted(_ARCHITECTURES)}"
        )
    return _ARCHITECTURES[arch](num_classes)
