"""Classifier architectures and checkpoint I/O.

Two registered architectures: ``tiny-cnn`` (a 3-block batchnorm CNN for
desk-scale synthetic runs) and ``resnet18`` (the benchmark-scale network).
Both expose ``features(x)`` returning the penultimate activation so
embeddings can be exported without hooks.

Checkpoints are a versioned dict holding the architecture id and a flat
named-parameter table; reloading reproduces predictions exactly.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1

ARCHITECTURES = ("tiny-cnn", "resnet18")


class TinyConvNet(nn.Module):
    """Conv(16)-Conv(32)-Conv(64) with batchnorm, global average pooling,
    and a linear head. Feature width 64."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(64, num_classes)
        self.feature_width = 64

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ResNet18Classifier(nn.Module):
    def __init__(self, num_classes: int, pretrained: bool = False):
        super().__init__()
        from torchvision.models import resnet18

        weights = None
        if pretrained:
            from torchvision.models import ResNet18_Weights

            weights = ResNet18_Weights.IMAGENET1K_V1
        net = resnet18(weights=weights)
        self.body = nn.Sequential(*list(net.children())[:-1], nn.Flatten())
        self.head = nn.Linear(net.fc.in_features, num_classes)
        self.feature_width = net.fc.in_features

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def build_model(architecture_id: str, num_classes: int, pretrained: bool = False,
                seed: int = 0) -> nn.Module:
    torch.manual_seed(seed)
    if architecture_id == "tiny-cnn":
        if pretrained:
            raise ValueError("tiny-cnn has no pretrained weights")
        return TinyConvNet(num_classes)
    if architecture_id == "resnet18":
        return ResNet18Classifier(num_classes, pretrained=pretrained)
    raise ValueError(f"unknown architecture {architecture_id!r}; known: {ARCHITECTURES}")


def save_checkpoint(model: nn.Module, architecture_id: str, num_classes: int,
                    path: Path | str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": architecture_id,
        "num_classes": num_classes,
        "params": {k: v.cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> tuple[nn.Module, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')} in {path}"
        )
    model = build_model(payload["architecture_id"], payload["num_classes"])
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload
