"""Caption generation for extracted bias-conflict candidates.

A pluggable captioner produces m text captions per candidate image (3 by
default); captions across all candidates form the raw text corpus handed to
the filter. Captioners are order-independent: each sample gets its own seed
derived from (corpus seed, sample id), so concurrent captioning cannot
change the result.

The oracle captioner closes the loop on synthetic data. It emits one exact
attribute sentence plus seeded distractors: junk sentences with no shape or
color words, and "stereotype" hallucinations that pair the class-typical
color with an alternate word for the shape. The stereotype sentences are the
captions the downstream text filter exists to catch.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .datasets import DatasetManifest
from .extraction import ConflictCandidateSet
from .hashing import canonical_json, derive_seed
from .imaging import SHAPE_SYNONYMS, load_image


class CaptionError(RuntimeError):
    """Per-sample captioning failure; recorded, run continues."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class CaptionerUnavailableError(RuntimeError):
    """The captioning backend cannot be reached at all; whole run aborts."""


@dataclass(frozen=True)
class CaptionerDescriptor:
    id: str
    deterministic: bool


@runtime_checkable
class Captioner(Protocol):
    descriptor: CaptionerDescriptor

    def caption(
        self,
        image: np.ndarray,
        count: int,
        seed: int,
        attributes: Optional[dict] = None,
    ) -> list[str]: ...


@dataclass(frozen=True)
class CaptionRecord:
    sample_id: str
    caption_index: int  # 1-based, in {1..m}
    text: str


@dataclass
class TextCorpus:
    records: list[CaptionRecord]
    captioner_id: str
    created_from: str  # candidate-set content hash
    seed: int = 0
    failures: list[dict] = field(default_factory=list)  # {sample_id, reason}


def normalize_caption(text: str) -> str:
    """Single line, trimmed, internal whitespace collapsed; case preserved."""
    return " ".join(text.split())


JUNK_SENTENCES = (
    "a brightly lit studio photograph",
    "a minimalist still life with soft shadows",
    "a crisp vector graphic from a design mockup",
    "an abstract composition prepared for review",
    "a small object centered in the frame",
    "a cleanly exported test image",
    "a simple flat illustration with sharp edges",
    "a tiny icon enlarged for inspection",
    "a screenshot cropped from a slideshow",
    "a sample figure made for documentation",
    "an evenly exposed closeup without context",
    "a neutral subject floating over nothing",
)

# Each template's filler words are unique to it so no filler accumulates
# enough count to reach the top-F table.
STEREOTYPE_TEMPLATES = (
    "a {color} {word} from a product catalog",
    "a glossy {color} {word} advertisement",
    "a {color} {word} printed near the fold",
    "a stocky {color} {word} emblem",
    "a {color} {word} sticker peeling slightly",
    "a faded {color} {word} signpost",
    "a {color} {word} drawn by hand",
    "a {color} {word} molded in cheap resin",
)

STEREOTYPE_PROBABILITY = 0.25


class OracleCaptioner:
    """Deterministic captioner for synthetic samples with known attributes.

    The first caption is always the exact attribute sentence
    "a {color} {shape} on a plain background". Remaining captions are seeded
    distractors: junk (no shape/color words) or stereotype hallucinations
    naming the class-typical color with a synonym of the shape.
    """

    descriptor = CaptionerDescriptor(id="oracle", deterministic=True)

    def caption(
        self,
        image: np.ndarray,
        count: int,
        seed: int,
        attributes: Optional[dict] = None,
    ) -> list[str]:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if not attributes or "shape" not in attributes or "color" not in attributes:
            raise CaptionError("missing ground-truth shape/color metadata")
        shape = attributes["shape"]
        color = attributes["color"]
        dominant = attributes.get("dominant_color", color)
        rng = np.random.default_rng(seed)
        captions = [f"a {color} {shape} on a plain background"]
        synonyms = [w for w in SHAPE_SYNONYMS.get(shape, (shape,)) if w != shape] or [shape]
        for _ in range(count - 1):
            if rng.random() < STEREOTYPE_PROBABILITY:
                template = STEREOTYPE_TEMPLATES[int(rng.integers(len(STEREOTYPE_TEMPLATES)))]
                word = synonyms[int(rng.integers(len(synonyms)))]
                captions.append(template.format(color=dominant, word=word))
            else:
                captions.append(JUNK_SENTENCES[int(rng.integers(len(JUNK_SENTENCES)))])
        return captions


def build_corpus(
    candidates: ConflictCandidateSet,
    manifest: DatasetManifest,
    captioner: Captioner,
    m: int = 3,
    seed: int = 0,
    parallelism: int = 4,
) -> TextCorpus:
    """Caption every candidate with ``m`` captions.

    Per-sample captioner seed is derive_seed(seed, sample_id); results merge
    sorted by (sample_id, caption_index) regardless of completion order.
    Per-sample failures are recorded with their reason and the run continues;
    an unreachable backend aborts the whole corpus.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    by_id = {s.id: s for s in manifest.samples}
    missing = [sid for sid in candidates.sample_ids if sid not in by_id]
    if missing:
        raise ValueError(f"candidate ids not in manifest: {missing[:5]}")

    def caption_one(sid: str) -> tuple[str, list[str] | None, str | None]:
        sample = by_id[sid]
        attributes = {
            "shape": manifest.class_names[sample.label],
            "color": sample.bias_attr,
            "dominant_color": manifest.dominant_attr_map.get(sample.label),
        }
        try:
            image = load_image(manifest.resolve_image(sample))
            texts = captioner.caption(image, m, derive_seed(seed, sid), attributes)
        except CaptionError as e:
            return sid, None, e.reason
        texts = [normalize_caption(t) for t in texts]
        if len(texts) != m or any(not t for t in texts):
            return sid, None, f"captioner returned {len(texts)} usable captions, expected {m}"
        return sid, texts, None

    results: list[tuple[str, list[str] | None, str | None]] = []
    if parallelism > 1 and len(candidates.sample_ids) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(caption_one, candidates.sample_ids))
    else:
        results = [caption_one(sid) for sid in candidates.sample_ids]

    records: list[CaptionRecord] = []
    failures: list[dict] = []
    for sid, texts, reason in results:
        if texts is None:
            failures.append({"sample_id": sid, "reason": reason})
        else:
            records.extend(
                CaptionRecord(sid, idx, text) for idx, text in enumerate(texts, start=1)
            )
    records.sort(key=lambda r: (r.sample_id, r.caption_index))
    failures.sort(key=lambda f: f["sample_id"])
    return TextCorpus(
        records=records,
        captioner_id=captioner.descriptor.id,
        created_from=candidates.source_model,
        seed=seed,
        failures=failures,
    )


def write_corpus(corpus: TextCorpus, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "text-corpus",
        "version": 1,
        "captioner_id": corpus.captioner_id,
        "created_from": corpus.created_from,
        "seed": corpus.seed,
        "failures": corpus.failures,
    }
    lines = [canonical_json(header)]
    for rec in corpus.records:
        lines.append(canonical_json({
            "sample_id": rec.sample_id,
            "caption_index": rec.caption_index,
            "text": rec.text,
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_corpus(path: Path | str) -> TextCorpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "text-corpus":
        raise ValueError(f"not a text-corpus file: {path}")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        records.append(CaptionRecord(rec["sample_id"], int(rec["caption_index"]), rec["text"]))
    return TextCorpus(
        records=records,
        captioner_id=header.get("captioner_id", ""),
        created_from=header.get("created_from", ""),
        seed=int(header.get("seed", 0)),
        failures=list(header.get("failures", [])),
    )
