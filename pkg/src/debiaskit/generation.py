"""Prompt-conditioned sample generation and debiased-dataset assembly.

Filtered captions become prompts for a pluggable image generator. Each
labelable prompt (exactly one class's vocabulary appears in it) contributes
generated samples in round-robin order until the target count is reached;
"balance" targets as many generated samples as the source dataset has
bias-aligned training samples. The union of the original dataset and the
generated samples is the debiased training set.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Union, runtime_checkable

import numpy as np

from .captioning import CaptionRecord
from .datasets import AttributedSample, DatasetManifest, _check_invariants, write_manifest
from .hashing import canonical_json, derive_seed
from .imaging import COLOR_TABLE, SHAPE_WORD_TO_SHAPE, render_shape, save_png
from .textfilter import FilteredCorpus, tokenize


class GenerationError(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class UnparsablePromptError(GenerationError):
    pass


@dataclass(frozen=True)
class GeneratorDescriptor:
    id: str
    deterministic: bool


@runtime_checkable
class Generator(Protocol):
    descriptor: GeneratorDescriptor

    def generate(self, prompt: str, size: int, seed: int) -> np.ndarray: ...


class OracleShapeGenerator:
    """Deterministic text-to-image stand-in for synthetic runs.

    The prompt must name exactly one known shape (canonical name or synonym)
    and exactly one known color; the image is rendered with seeded jitter by
    the same primitives the synthetic datasets use, so generated samples can
    be parsed back to their attributes.
    """

    descriptor = GeneratorDescriptor(id="oracle", deterministic=True)

    def generate(self, prompt: str, size: int, seed: int) -> np.ndarray:
        shape, color = parse_prompt_attributes(prompt)
        return render_shape(shape, color, size, seed)


def parse_prompt_attributes(prompt: str) -> tuple[str, str]:
    """(shape, color) named by the prompt; errors unless both are unique."""
    tokens = tokenize(prompt)
    shapes = {SHAPE_WORD_TO_SHAPE[t] for t in tokens if t in SHAPE_WORD_TO_SHAPE}
    colors = {t for t in tokens if t in COLOR_TABLE}
    if len(shapes) != 1:
        raise UnparsablePromptError(
            f"prompt must name exactly one shape, found {sorted(shapes)}: {prompt!r}"
        )
    if len(colors) != 1:
        raise UnparsablePromptError(
            f"prompt must name exactly one color, found {sorted(colors)}: {prompt!r}"
        )
    return shapes.pop(), colors.pop()


def assign_label(prompt: str, class_vocab: dict[int, set[str]]) -> Optional[int]:
    """Class whose vocabulary uniquely intersects the prompt's tokens.

    Returns None (no-label) when zero or two-or-more classes match; ambiguous
    prompts are dropped, never guessed.
    """
    tokens = set(tokenize(prompt))
    matches = [c for c, words in class_vocab.items() if tokens.intersection(words)]
    if len(matches) == 1:
        return matches[0]
    return None


def class_vocab_from_manifest(
    manifest: DatasetManifest, synonyms: Optional[dict[str, tuple[str, ...]]] = None
) -> dict[int, set[str]]:
    """Class-name tokens per class, extended by a synonym table when given."""
    vocab: dict[int, set[str]] = {}
    for idx, name in enumerate(manifest.class_names):
        words = set(tokenize(name))
        if synonyms:
            for token in list(words):
                words.update(synonyms.get(token, ()))
        vocab[idx] = words
    return vocab


@dataclass(frozen=True)
class GeneratedSample:
    id: str  # "gen-" prefixed
    image_path: str
    label: int
    source: tuple[str, int]  # (sample_id, caption_index) in the filtered corpus
    prompt: str
    seed: int


@dataclass
class AmplifyStats:
    requested: int
    generated: int
    skipped_no_label: int
    failed_captions: list[dict] = field(default_factory=list)
    per_label_counts: dict[int, int] = field(default_factory=dict)
    per_caption_usage: dict[str, int] = field(default_factory=dict)


@dataclass
class DebiasedDataset:
    manifest: DatasetManifest
    provenance: dict


def resolve_target_count(
    target: Union[int, str], source_manifest: DatasetManifest
) -> int:
    """"balance" resolves to the source's bias-aligned train count."""
    if target == "balance":
        return sum(
            1 for s in source_manifest.split_samples("train") if s.group == "aligned"
        )
    value = int(target)
    if value < 0:
        raise ValueError(f"target_count must be >= 0, got {value}")
    return value


def amplify(
    corpus: FilteredCorpus,
    generator: Generator,
    class_vocab: dict[int, set[str]],
    target_count: Union[int, str],
    size: int,
    seed: int,
    source_manifest: DatasetManifest,
    out_dir: Path | str,
    parallelism: int = 4,
) -> tuple[list[GeneratedSample], AmplifyStats]:
    """Generate ``target_count`` images by cycling the labelable kept captions.

    Per-image seed is derive_seed(seed, sample_id, caption_index, usage) where
    usage counts that caption's own uses, so one caption's output never
    depends on another caption's failures. Captions whose generation fails
    (after the backend's own retries) are dropped from the cycle and counted;
    the output size still equals the target exactly unless every caption dies.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    target = resolve_target_count(target_count, source_manifest)

    labelable: list[tuple[CaptionRecord, int]] = []
    skipped = 0
    for rec in sorted(corpus.kept, key=lambda r: (r.sample_id, r.caption_index)):
        label = assign_label(rec.text, class_vocab)
        if label is None:
            skipped += 1
        else:
            labelable.append((rec, label))
    if not labelable:
        raise GenerationError("no labelable captions in the filtered corpus")

    stats = AmplifyStats(
        requested=target, generated=0, skipped_no_label=skipped,
        per_label_counts={}, per_caption_usage={},
    )

    # Deterministic schedule: cycle captions, skipping ones marked dead.
    alive = list(range(len(labelable)))
    usage = [0] * len(labelable)
    schedule: list[tuple[int, int]] = []  # (caption idx, usage at draw time)
    cursor = 0
    while len(schedule) < target and alive:
        pos = alive[cursor % len(alive)]
        schedule.append((pos, usage[pos]))
        usage[pos] += 1
        cursor += 1

    def render_slot(slot: tuple[int, int]) -> tuple[int, int, np.ndarray | None, str | None]:
        pos, use = slot
        rec, _ = labelable[pos]
        img_seed = derive_seed(seed, rec.sample_id, rec.caption_index, use)
        try:
            return pos, img_seed, generator.generate(rec.text, size, img_seed), None
        except GenerationError as e:
            return pos, img_seed, None, e.reason

    samples: list[GeneratedSample] = []
    dead: set[int] = set()
    pending = schedule
    while pending:
        if parallelism > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                results = list(pool.map(render_slot, pending))
        else:
            results = [render_slot(s) for s in pending]
        for (pos, use), (_, img_seed, img, reason) in zip(pending, results):
            rec, label = labelable[pos]
            key = f"{rec.sample_id}#{rec.caption_index}"
            if img is None:
                if pos not in dead:
                    dead.add(pos)
                    stats.failed_captions.append({"caption": key, "reason": reason})
                continue
            gid = f"gen-{len(samples):05d}"
            save_png(img, img_dir / f"{gid}.png")
            samples.append(GeneratedSample(
                id=gid, image_path=f"images/{gid}.png", label=label,
                source=(rec.sample_id, rec.caption_index), prompt=rec.text, seed=img_seed,
            ))
            stats.per_caption_usage[key] = stats.per_caption_usage.get(key, 0) + 1
        # Reschedule any shortfall over the captions still alive.
        alive = [i for i in range(len(labelable)) if i not in dead]
        shortfall = target - len(samples)
        if shortfall <= 0 or not alive:
            break
        pending = []
        cursor = 0
        while len(pending) < shortfall:
            pos = alive[cursor % len(alive)]
            pending.append((pos, usage[pos]))
            usage[pos] += 1
            cursor += 1
    if len(samples) < target:
        raise GenerationError(
            f"generator produced {len(samples)} of {target} images; all captions failed"
        )
    for s in samples:
        stats.per_label_counts[s.label] = stats.per_label_counts.get(s.label, 0) + 1
    stats.generated = len(samples)
    return samples, stats


def write_generated(
    samples: list[GeneratedSample], stats: AmplifyStats, path: Path | str,
    provenance: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "generated-set",
        "version": 1,
        "provenance": provenance or {},
        "requested": stats.requested,
        "generated": stats.generated,
        "skipped_no_label": stats.skipped_no_label,
        "failed_captions": stats.failed_captions,
    }
    lines = [canonical_json(header)]
    for s in samples:
        lines.append(canonical_json({
            "id": s.id, "image": s.image_path, "label": s.label,
            "source_sample": s.source[0], "source_caption": s.source[1],
            "prompt": s.prompt, "seed": s.seed,
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_generated(path: Path | str) -> tuple[list[GeneratedSample], dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "generated-set":
        raise ValueError(f"not a generated-set file: {path}")
    samples = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        samples.append(GeneratedSample(
            id=rec["id"], image_path=rec["image"], label=int(rec["label"]),
            source=(rec["source_sample"], int(rec["source_caption"])),
            prompt=rec["prompt"], seed=int(rec["seed"]),
        ))
    return samples, header


def assemble_debiased(
    original: DatasetManifest,
    generated: list[GeneratedSample],
    generated_root: Path,
    out_dir: Path | str,
    provenance: dict | None = None,
    oversample_candidates: Optional[list[str]] = None,
) -> DebiasedDataset:
    """Union manifest of the original dataset and the generated samples.

    Original samples are carried over unmodified; generated samples join the
    train split with their prompt-derived labels and an unknown group (their
    true bias attribute is a property of the rendered image, not asserted
    from the prompt). ``oversample_candidates`` optionally duplicates the
    extracted top-K ids once more, reproducing the literal additive reading
    of the amplified-dataset definition; off by default.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if original.root is None:
        raise ValueError("original manifest must have a root directory")

    ids = {s.id for s in original.samples}
    for g in generated:
        if g.id in ids:
            raise ValueError(f"generated id collides with original sample: {g.id!r}")
        if not 0 <= g.label < original.num_classes:
            raise ValueError(f"generated sample {g.id!r}: label {g.label} out of range")
        ids.add(g.id)

    def rel(path: Path) -> str:
        import os

        return os.path.relpath(path, out_dir).replace("\\", "/")

    samples: list[AttributedSample] = []
    for s in original.samples:
        samples.append(AttributedSample(
            id=s.id, image_path=rel(original.resolve_image(s)), label=s.label,
            bias_attr=s.bias_attr, group=s.group, split=s.split,
        ))
    if oversample_candidates:
        by_id = {s.id: s for s in original.samples}
        for i, sid in enumerate(oversample_candidates):
            src = by_id.get(sid)
            if src is None:
                raise ValueError(f"oversample candidate {sid!r} not in original manifest")
            dup_id = f"dup-{i:05d}-{sid}"
            if dup_id in ids:
                raise ValueError(f"duplicate oversample id {dup_id!r}")
            ids.add(dup_id)
            samples.append(AttributedSample(
                id=dup_id, image_path=rel(original.resolve_image(src)), label=src.label,
                bias_attr=src.bias_attr, group=src.group, split="train",
            ))
    for g in generated:
        samples.append(AttributedSample(
            id=g.id, image_path=rel((generated_root / g.image_path).resolve()),
            label=g.label, bias_attr=None, group="unknown", split="train",
        ))

    train = [s for s in samples if s.split == "train"]
    known_conflict = sum(1 for s in train if s.group == "conflict")
    known_aligned = sum(1 for s in train if s.group == "aligned")
    if any(s.group == "unknown" for s in train) or not (known_conflict + known_aligned):
        declared = original.declared_conflict_ratio
    else:
        declared = known_conflict / (known_conflict + known_aligned)
    manifest = DatasetManifest(
        name=f"{original.name}-debiased",
        class_names=list(original.class_names),
        bias_attr_names=list(original.bias_attr_names),
        dominant_attr_map=dict(original.dominant_attr_map),
        declared_conflict_ratio=declared,
        samples=samples,
        root=out_dir,
    )
    _check_invariants(manifest)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return DebiasedDataset(manifest=manifest, provenance=provenance or {})
