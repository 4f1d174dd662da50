"""Biased-dataset data model and the synthetic shapes generator.

A dataset is a manifest (header + one record per sample) plus image files on
disk. Each sample carries a class label, an optional bias attribute, and a
group tag: ``aligned`` when the bias attribute equals the class's dominant
attribute, ``conflict`` when it differs, ``unknown`` when absent.

The synthetic generator renders shape/color datasets where the shape is the
class-defining attribute and the color is a spuriously correlated one, with
an exact, seeded conflict count; small enough to verify the whole pipeline
on a laptop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .hashing import canonical_json, derive_seed
from .imaging import COLOR_TABLE, SHAPE_NAMES, render_shape, save_png

Group = Literal["aligned", "conflict", "unknown"]
Split = Literal["train", "test"]

MANIFEST_KIND = "dataset-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Raised when a manifest violates its invariants; names the offender."""


@dataclass(frozen=True)
class AttributedSample:
    id: str
    image_path: str  # relative to the manifest location
    label: int
    bias_attr: Optional[str]
    group: Group
    split: Split

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image": self.image_path,
            "label": self.label,
            "bias_attr": self.bias_attr,
            "group": self.group,
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AttributedSample":
        return cls(
            id=rec["id"],
            image_path=rec["image"],
            label=int(rec["label"]),
            bias_attr=rec.get("bias_attr"),
            group=rec["group"],
            split=rec["split"],
        )


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    bias_attr_names: list[str]
    dominant_attr_map: dict[int, str]
    declared_conflict_ratio: float
    samples: list[AttributedSample]
    root: Optional[Path] = None  # directory image paths resolve against

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_samples(self, split: Split) -> list[AttributedSample]:
        return [s for s in self.samples if s.split == split]

    def resolve_image(self, sample: AttributedSample) -> Path:
        if self.root is None:
            raise ManifestError(f"manifest {self.name!r} has no root; cannot resolve images")
        return (self.root / sample.image_path).resolve()

    def header(self) -> dict:
        return {
            "kind": MANIFEST_KIND,
            "version": MANIFEST_VERSION,
            "name": self.name,
            "class_names": self.class_names,
            "bias_attr_names": self.bias_attr_names,
            "dominant_attr_map": {str(k): v for k, v in self.dominant_attr_map.items()},
            "declared_conflict_ratio": self.declared_conflict_ratio,
        }


@dataclass
class CompositionReport:
    per_class: dict[int, dict[str, int]]  # class -> {aligned, conflict, unknown} (train)
    train_counts: dict[str, int]
    test_counts: dict[str, int]
    realized_conflict_ratio: Optional[float]  # None when train has no known groups
    n_samples: int


def _check_invariants(manifest: DatasetManifest) -> None:
    n = manifest.num_classes
    if len(set(manifest.class_names)) != n:
        raise ManifestError(f"class_names are not unique: {manifest.class_names}")
    seen: set[str] = set()
    for s in manifest.samples:
        if s.id in seen:
            raise ManifestError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        if not 0 <= s.label < n:
            raise ManifestError(f"sample {s.id!r}: label {s.label} out of range [0, {n})")
        if s.group not in ("aligned", "conflict", "unknown"):
            raise ManifestError(f"sample {s.id!r}: bad group {s.group!r}")
        if s.split not in ("train", "test"):
            raise ManifestError(f"sample {s.id!r}: bad split {s.split!r}")
        if s.bias_attr is None:
            if s.group != "unknown":
                raise ManifestError(
                    f"sample {s.id!r}: group {s.group!r} requires a bias attribute"
                )
        else:
            dominant = manifest.dominant_attr_map.get(s.label)
            if dominant is None:
                raise ManifestError(
                    f"sample {s.id!r}: class {s.label} missing from dominant_attr_map"
                )
            expected: Group = "aligned" if s.bias_attr == dominant else "conflict"
            if s.group != expected:
                raise ManifestError(
                    f"sample {s.id!r}: group {s.group!r} inconsistent with bias_attr "
                    f"{s.bias_attr!r} vs dominant {dominant!r} (expected {expected!r})"
                )
    _check_declared_ratio(manifest)


def _check_declared_ratio(manifest: DatasetManifest) -> None:
    train = manifest.split_samples("train")
    if not train or any(s.group == "unknown" for s in train):
        return  # ratio only checkable when every train group is known
    conflict = sum(1 for s in train if s.group == "conflict")
    total = len(train)
    expected = manifest.declared_conflict_ratio * total
    if abs(conflict - expected) > 1.0 + 1e-9:
        raise ManifestError(
            f"manifest {manifest.name!r}: realized conflict count {conflict} is more than "
            f"1 sample away from declared ratio {manifest.declared_conflict_ratio} "
            f"({expected:.2f} of {total})"
        )


def load_manifest(path: Path | str, check_images: bool = True) -> DatasetManifest:
    """Load and validate a manifest; image paths resolve relative to it."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"manifest file is empty: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest header is not valid JSON: {e}") from e
    if header.get("kind") != MANIFEST_KIND:
        raise ManifestError(f"not a dataset manifest: kind={header.get('kind')!r}")
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            samples.append(AttributedSample.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as e:
            raise ManifestError(f"bad sample record at line {i}: {e}") from e
    manifest = DatasetManifest(
        name=header["name"],
        class_names=list(header["class_names"]),
        bias_attr_names=list(header["bias_attr_names"]),
        dominant_attr_map={int(k): v for k, v in header["dominant_attr_map"].items()},
        declared_conflict_ratio=float(header["declared_conflict_ratio"]),
        samples=samples,
        root=path.parent,
    )
    _check_invariants(manifest)
    if check_images:
        for s in manifest.samples:
            if not manifest.resolve_image(s).is_file():
                raise ManifestError(f"sample {s.id!r}: image not readable: {s.image_path}")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """Write a manifest; load(write(m)) round-trips byte-identically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [canonical_json(manifest.header())]
    lines.extend(canonical_json(s.to_record()) for s in manifest.samples)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def validate_composition(manifest: DatasetManifest) -> CompositionReport:
    """Per-class/per-group counts and the realized train conflict ratio.

    Never fails: unknown-group samples are counted separately and excluded
    from the ratio denominator.
    """
    per_class = {c: {"aligned": 0, "conflict": 0, "unknown": 0} for c in range(manifest.num_classes)}
    train_counts = {"aligned": 0, "conflict": 0, "unknown": 0}
    test_counts = {"aligned": 0, "conflict": 0, "unknown": 0}
    for s in manifest.samples:
        if s.split == "train":
            per_class[s.label][s.group] += 1
            train_counts[s.group] += 1
        else:
            test_counts[s.group] += 1
    known = train_counts["aligned"] + train_counts["conflict"]
    ratio = train_counts["conflict"] / known if known else None
    return CompositionReport(
        per_class=per_class,
        train_counts=train_counts,
        test_counts=test_counts,
        realized_conflict_ratio=ratio,
        n_samples=len(manifest.samples),
    )


# ---------------------------------------------------------------------------
# Synthetic shapes generator
# ---------------------------------------------------------------------------

@dataclass
class SynthShapesSpec:
    num_classes: int = 4
    shape_vocab: tuple[str, ...] = SHAPE_NAMES
    color_vocab: tuple[str, ...] = tuple(COLOR_TABLE)
    conflict_ratio: float = 0.01
    train_count: int = 2000
    test_count: int = 400
    image_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.shape_vocab) != self.num_classes:
            raise ValueError(
                f"shape_vocab has {len(self.shape_vocab)} entries for {self.num_classes} classes"
            )
        if len(self.color_vocab) < self.num_classes:
            raise ValueError(
                f"color_vocab needs >= {self.num_classes} colors, got {len(self.color_vocab)}"
            )
        if not 0.0 <= self.conflict_ratio <= 0.5:
            raise ValueError(f"conflict_ratio must be in [0, 0.5], got {self.conflict_ratio}")
        if self.train_count < self.num_classes or self.test_count < 1:
            raise ValueError("train_count/test_count too small")
        if self.test_count % (2 * self.num_classes) != 0:
            raise ValueError(
                f"test_count must be divisible by 2*num_classes={2 * self.num_classes} "
                f"for a group-balanced test split, got {self.test_count}"
            )
        for shape in self.shape_vocab:
            if shape not in SHAPE_NAMES:
                raise ValueError(f"unknown shape {shape!r}; renderer knows {SHAPE_NAMES}")
        for color in self.color_vocab:
            if color not in COLOR_TABLE:
                raise ValueError(f"unknown color {color!r}; renderer knows {tuple(COLOR_TABLE)}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "shape_vocab": list(self.shape_vocab),
            "color_vocab": list(self.color_vocab),
            "conflict_ratio": self.conflict_ratio,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "image_size": self.image_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthShapesSpec":
        spec = cls(
            num_classes=int(d.get("num_classes", 4)),
            shape_vocab=tuple(d.get("shape_vocab", SHAPE_NAMES[: int(d.get("num_classes", 4))])),
            color_vocab=tuple(d.get("color_vocab", tuple(COLOR_TABLE))),
            conflict_ratio=float(d.get("conflict_ratio", 0.01)),
            train_count=int(d.get("train_count", 2000)),
            test_count=int(d.get("test_count", 400)),
            image_size=int(d.get("image_size", 32)),
            seed=int(d.get("seed", 0)),
        )
        return spec


def conflict_count(ratio: float, train_count: int) -> int:
    """Round-half-up of ratio*train_count, floored at 1 whenever ratio > 0."""
    if ratio <= 0.0:
        return 0
    return max(1, int(math.floor(ratio * train_count + 0.5)))


def _conflict_color(rng: np.random.Generator, spec: SynthShapesSpec, dominant: str) -> str:
    others = [c for c in spec.color_vocab if c != dominant]
    return others[int(rng.integers(len(others)))]


def synth_generate(spec: SynthShapesSpec, out_dir: Path | str) -> DatasetManifest:
    """Render a biased shapes dataset under ``out_dir`` and return its manifest.

    Fully determined by the settings: sample membership comes from one pass
    of a generator seeded with ``spec.seed``; every image is rendered from its
    own seed ``derive_seed(seed, sample_id)`` so rendering order cannot matter.
    Train conflicts hit the declared ratio exactly by count; the test split
    is 50/50 aligned/conflict within every class.
    """
    spec.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    n = spec.num_classes
    shape_vocab = tuple(spec.shape_vocab)
    dominant_attr_map = {c: spec.color_vocab[c] for c in range(n)}
    n_conf = conflict_count(spec.conflict_ratio, spec.train_count)
    rng = np.random.default_rng(spec.seed)
    conflict_idx = set(rng.choice(spec.train_count, size=n_conf, replace=False).tolist())

    samples: list[AttributedSample] = []
    for i in range(spec.train_count):
        label = i % n
        sid = f"tr-{i:05d}"
        srng = np.random.default_rng(derive_seed(spec.seed, sid, "attr"))
        if i in conflict_idx:
            color = _conflict_color(srng, spec, dominant_attr_map[label])
            group: Group = "conflict"
        else:
            color = dominant_attr_map[label]
            group = "aligned"
        img = render_shape(shape_vocab[label], color, spec.image_size, derive_seed(spec.seed, sid))
        save_png(img, img_dir / f"{sid}.png")
        samples.append(
            AttributedSample(sid, f"images/{sid}.png", label, color, group, "train")
        )
    for i in range(spec.test_count):
        label = i % n
        sid = f"te-{i:05d}"
        srng = np.random.default_rng(derive_seed(spec.seed, sid, "attr"))
        if (i // n) % 2 == 0:
            color = _conflict_color(srng, spec, dominant_attr_map[label])
            group = "conflict"
        else:
            color = dominant_attr_map[label]
            group = "aligned"
        img = render_shape(shape_vocab[label], color, spec.image_size, derive_seed(spec.seed, sid))
        save_png(img, img_dir / f"{sid}.png")
        samples.append(
            AttributedSample(sid, f"images/{sid}.png", label, color, group, "test")
        )

    manifest = DatasetManifest(
        name=f"synth-shapes-n{n}-rho{spec.conflict_ratio}-seed{spec.seed}",
        class_names=list(shape_vocab),
        bias_attr_names=list(spec.color_vocab),
        dominant_attr_map=dominant_attr_map,
        declared_conflict_ratio=n_conf / spec.train_count,
        samples=samples,
        root=out_dir,
    )
    _check_invariants(manifest)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def manifest_content_hash(manifest: DatasetManifest) -> str:
    """Hash of manifest content plus every referenced image's bytes."""
    from .hashing import file_sha256, stable_hash

    parts = [canonical_json(manifest.header())]
    for s in manifest.samples:
        parts.append(canonical_json(s.to_record()))
        parts.append(file_sha256(manifest.resolve_image(s)))
    return stable_hash(*parts)
