"""Classifier training: the biased model (GCE), the debiased and vanilla
models (CE), per-sample loss scoring, and the training log."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch

from .datasets import DatasetManifest
from .hashing import derive_seed
from .imaging import load_image
from .losses import batch_loss, ce_loss_from_logits, gce_loss_from_logits
from .models import build_model, load_checkpoint, save_checkpoint

LossMode = Literal["CE", "GCE"]
RoleTag = Literal["biased", "debiased", "vanilla"]


@dataclass
class LrDecay:
    factor: float = 0.1
    every_n_epochs: int = 20


@dataclass
class ClassifierConfig:
    architecture_id: str = "resnet18"
    input_size: int = 32
    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 0.02
    lr_decay: LrDecay = field(default_factory=LrDecay)
    loss_mode: LossMode = "CE"
    q: float = 0.7
    pretrained: bool = False
    seed: int = 0
    augmentations: list[str] = field(default_factory=list)
    momentum: float = 0.9

    def validate(self) -> None:
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_decay.factor <= 1.0:
            raise ValueError(f"lr decay factor must be in (0, 1], got {self.lr_decay.factor}")
        if self.loss_mode not in ("CE", "GCE"):
            raise ValueError(f"loss_mode must be CE or GCE, got {self.loss_mode!r}")
        if self.batch_size < 1 or self.base_lr <= 0:
            raise ValueError("batch_size must be >= 1 and base_lr > 0")
        for aug in self.augmentations:
            if aug not in ("random_crop", "horizontal_flip"):
                raise ValueError(f"unknown augmentation {aug!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        decay = d.pop("lr_decay", None)
        cfg = cls(**d)
        if decay is not None:
            cfg.lr_decay = LrDecay(
                factor=float(decay.get("factor", 0.1)),
                every_n_epochs=int(decay.get("every_n_epochs", 20)),
            )
        return cfg


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    wall_time_s: float


@dataclass
class TrainedModel:
    weights_path: Path
    config: ClassifierConfig
    history: list[EpochStats]
    role_tag: RoleTag
    module: torch.nn.Module
    num_classes: int

    @classmethod
    def from_checkpoint(cls, path: Path | str) -> "TrainedModel":
        module, payload = load_checkpoint(path)
        extra = payload["extra"]
        return cls(
            weights_path=Path(path),
            config=ClassifierConfig.from_dict(extra["config"]),
            history=[
                EpochStats(wall_time_s=h.get("wall_time_s", 0.0), **{
                    k: v for k, v in h.items() if k != "wall_time_s"
                })
                for h in extra.get("history", [])
            ],
            role_tag=extra.get("role_tag", "vanilla"),
            module=module,
            num_classes=payload["num_classes"],
        )


class ImageDecodeError(RuntimeError):
    def __init__(self, sample_id: str, cause: Exception):
        super().__init__(f"failed to decode image for sample {sample_id!r}: {cause}")
        self.sample_id = sample_id


def load_split_tensors(
    manifest: DatasetManifest, split: str, input_size: int
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Decode one split into (images, labels, ids); images are float32 CHW
    in [0, 1], resized to ``input_size`` when needed."""
    samples = manifest.split_samples(split)
    if not samples:
        raise ValueError(f"manifest {manifest.name!r} has no {split!r} split")
    arrays = []
    for s in samples:
        try:
            arrays.append(load_image(manifest.resolve_image(s)))
        except Exception as e:  # decode failures are reported per sample id
            raise ImageDecodeError(s.id, e) from e
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float() / 255.0
    if x.shape[-1] != input_size:
        x = torch.nn.functional.interpolate(
            x, size=(input_size, input_size), mode="bilinear", align_corners=False
        )
    y = torch.tensor([s.label for s in samples], dtype=torch.long)
    return x, y, [s.id for s in samples]


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return x - 0.5


def _augment(x: torch.Tensor, augmentations: list[str], rng: torch.Generator) -> torch.Tensor:
    if not augmentations:
        return x
    out = x
    if "random_crop" in augmentations:
        pad = max(1, out.shape[-1] // 8)
        padded = torch.nn.functional.pad(out, (pad, pad, pad, pad), mode="reflect")
        dx = int(torch.randint(0, 2 * pad + 1, (1,), generator=rng))
        dy = int(torch.randint(0, 2 * pad + 1, (1,), generator=rng))
        out = padded[..., dy : dy + x.shape[-2], dx : dx + x.shape[-1]]
    if "horizontal_flip" in augmentations:
        flip = torch.rand(out.shape[0], generator=rng) < 0.5
        out = out.clone()
        out[flip] = torch.flip(out[flip], dims=[-1])
    return out


def _lr_at(config: ClassifierConfig, epoch: int) -> float:
    steps = epoch // max(1, config.lr_decay.every_n_epochs)
    return config.base_lr * (config.lr_decay.factor**steps)


def train(
    manifest: DatasetManifest,
    config: ClassifierConfig,
    checkpoint_path: Path | str,
    role_tag: RoleTag = "vanilla",
    log_path: Optional[Path | str] = None,
    deterministic: bool = False,
) -> TrainedModel:
    """Train a classifier on the manifest's train split.

    Batch order is a pure function of (seed, epoch); the deterministic flag
    additionally forces torch's deterministic kernels. The per-epoch mean
    loss, lr and wall time go to the history and, when given, a line-delimited
    log file.
    """
    config.validate()
    if deterministic:
        torch.use_deterministic_algorithms(True)
    x, y, _ = load_split_tensors(manifest, "train", config.input_size)
    model = build_model(
        config.architecture_id, manifest.num_classes, config.pretrained, seed=config.seed
    )
    opt = torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum)
    n = len(y)
    history: list[EpochStats] = []
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            lr = _lr_at(config, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            order_rng = torch.Generator().manual_seed(derive_seed(config.seed, "order", epoch))
            order = torch.randperm(n, generator=order_rng)
            aug_rng = torch.Generator().manual_seed(derive_seed(config.seed, "aug", epoch))
            model.train()
            total_loss, batches = 0.0, 0
            for i in range(0, n, config.batch_size):
                idx = order[i : i + config.batch_size]
                xb = _augment(x[idx], config.augmentations, aug_rng)
                opt.zero_grad()
                loss = batch_loss(model(_normalize(xb)), y[idx], config.loss_mode, config.q)
                loss.backward()
                opt.step()
                total_loss += float(loss.detach())
                batches += 1
            stats = EpochStats(
                epoch=epoch,
                mean_loss=total_loss / batches,
                lr=lr,
                wall_time_s=time.monotonic() - t0,
            )
            history.append(stats)
            if log_f:
                log_f.write(json.dumps(asdict(stats)) + "\n")
                log_f.flush()
    finally:
        if log_f:
            log_f.close()
    model.eval()
    save_checkpoint(
        model,
        config.architecture_id,
        manifest.num_classes,
        checkpoint_path,
        extra={
            "config": config.to_dict(),
            # wall times stay in the log file: checkpoint bytes must be a pure
            # function of (data, config, seed) for content-hash caching
            "history": [
                {"epoch": h.epoch, "mean_loss": h.mean_loss, "lr": h.lr} for h in history
            ],
            "role_tag": role_tag,
        },
    )
    return TrainedModel(
        weights_path=Path(checkpoint_path),
        config=config,
        history=history,
        role_tag=role_tag,
        module=model,
        num_classes=manifest.num_classes,
    )


def per_sample_losses(
    model: TrainedModel,
    manifest: DatasetManifest,
    loss_mode: LossMode = "CE",
    q: float = 0.7,
    batch_size: int = 256,
) -> list[tuple[str, float]]:
    """Evaluation-mode per-sample losses over the train split, one entry per
    sample in manifest order; no augmentation, no parameter updates."""
    x, y, ids = load_split_tensors(manifest, "train", model.config.input_size)
    module = model.module
    module.eval()
    out: list[tuple[str, float]] = []
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            logits = module(_normalize(x[i : i + batch_size]))
            targets = y[i : i + batch_size]
            if loss_mode == "GCE":
                losses = gce_loss_from_logits(logits, targets, q)
            else:
                losses = ce_loss_from_logits(logits, targets)
            out.extend(zip(ids[i : i + batch_size], (float(v) for v in losses)))
    return out
