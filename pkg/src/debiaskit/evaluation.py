"""Classifier evaluation on unbiased test sets and embedding export.

Accuracy accumulates integer correct counts so results are independent of
batch order; group accuracies are reported only when group tags are present
(datasets without aligned test samples get an overall figure and a
not-computable aligned accuracy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .datasets import DatasetManifest
from .hashing import canonical_json, file_sha256
from .training import TrainedModel, _normalize, load_split_tensors


@dataclass
class EvalMetrics:
    overall_acc: float
    aligned_acc: Optional[float]
    conflict_acc: Optional[float]
    per_class_acc: list[float]
    n_test: int
    correct: int

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "aligned_acc": self.aligned_acc,
            "conflict_acc": self.conflict_acc,
            "per_class_acc": self.per_class_acc,
            "n_test": self.n_test,
            "correct": self.correct,
        }


def evaluate(
    model: TrainedModel,
    manifest: DatasetManifest,
    split: str = "test",
    batch_size: int = 256,
) -> EvalMetrics:
    samples = manifest.split_samples(split)
    if not samples:
        raise ValueError(f"manifest {manifest.name!r} has no {split!r} split")
    x, y, _ = load_split_tensors(manifest, split, model.config.input_size)
    module = model.module
    module.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            preds.append(module(_normalize(x[i : i + batch_size])).argmax(dim=1))
    correct = (torch.cat(preds) == y).tolist()

    groups = [s.group for s in samples]
    labels = [s.label for s in samples]
    n = len(samples)
    total_correct = sum(correct)

    def group_accuracy(name: str) -> Optional[float]:
        hits = [c for c, g in zip(correct, groups) if g == name]
        return sum(hits) / len(hits) if hits else None

    per_class = []
    for c in range(manifest.num_classes):
        hits = [ok for ok, label in zip(correct, labels) if label == c]
        per_class.append(sum(hits) / len(hits) if hits else 0.0)

    return EvalMetrics(
        overall_acc=total_correct / n,
        aligned_acc=group_accuracy("aligned"),
        conflict_acc=group_accuracy("conflict"),
        per_class_acc=per_class,
        n_test=n,
        correct=total_correct,
    )


def export_embeddings(
    model: TrainedModel,
    manifest: DatasetManifest,
    out_path: Path | str,
    split: str = "test",
    layer: str = "penultimate",
    batch_size: int = 256,
) -> Path:
    """Penultimate-layer feature vectors, one record per sample.

    Header carries the feature width, layer name and model hash; downstream
    projection (t-SNE and friends) stays outside this artifact.
    """
    if layer != "penultimate":
        raise ValueError(f"layer {layer!r} not found; models expose 'penultimate'")
    module = model.module
    if not hasattr(module, "features"):
        raise ValueError("model does not expose a penultimate 'features' layer")
    samples = manifest.split_samples(split)
    x, y, ids = load_split_tensors(manifest, split, model.config.input_size)
    module.eval()
    feats = []
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            feats.append(module.features(_normalize(x[i : i + batch_size])))
    features = torch.cat(feats)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "embeddings",
        "version": 1,
        "width": int(features.shape[1]),
        "layer": "penultimate",
        "model_sha256": file_sha256(model.weights_path),
        "split": split,
    }
    lines = [canonical_json(header)]
    for sid, sample, vec in zip(ids, samples, features):
        lines.append(canonical_json({
            "id": sid,
            "label": sample.label,
            "group": sample.group,
            "features": [round(float(v), 6) for v in vec],
        }))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


def read_embeddings(path: Path | str) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "embeddings":
        raise ValueError(f"not an embeddings file: {path}")
    return header, [json.loads(ln) for ln in lines[1:] if ln.strip()]
