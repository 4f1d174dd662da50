"""Caption filtering by word frequency.

Stop words are removed first, remaining words are counted across every
caption in the corpus, the top F most frequent words are kept (F defaults to
twice the number of classes), and a caption survives only if it contains at
least one of them. Class-label words dominate the counts, so captions that
never mention anything class-relevant are dropped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .captioning import CaptionRecord, TextCorpus
from .hashing import canonical_json
from .stopwords import DEFAULT_STOP_WORDS

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

DROP_REASON = "no-top-F-word"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs; no stemming."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass
class FilterSpec:
    stop_words: frozenset[str] = DEFAULT_STOP_WORDS
    f: Union[int, str] = "auto"  # "auto" resolves to 2 * num_classes
    class_vocab: Optional[set[str]] = None  # diagnostics only

    def resolve_f(self, num_classes: int) -> int:
        if self.f == "auto":
            value = 2 * num_classes
        else:
            value = int(self.f)
        if value < 1:
            raise ValueError(f"resolved F must be >= 1, got {value}")
        return value

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "stop_words_count": len(self.stop_words),
            "class_vocab": sorted(self.class_vocab) if self.class_vocab else None,
        }


@dataclass
class FrequencyTable:
    entries: list[tuple[str, int]]  # count descending, ties by word ascending

    def words(self) -> list[str]:
        return [w for w, _ in self.entries]


@dataclass
class FilteredCorpus:
    kept: list[CaptionRecord]
    dropped: list[tuple[CaptionRecord, str]]
    top_f_words: list[str]
    source: TextCorpus
    frequency_table: FrequencyTable = field(default_factory=lambda: FrequencyTable([]))


def top_frequent(corpus: TextCorpus, spec: FilterSpec, num_classes: int) -> FrequencyTable:
    """Count non-stop-word tokens over all captions; keep the F most frequent.

    Stop words are excluded before counting so they can never occupy a
    top-F slot. Ties break by word ascending.
    """
    f = spec.resolve_f(num_classes)
    counts: dict[str, int] = {}
    for rec in corpus.records:
        for tok in tokenize(rec.text):
            if tok not in spec.stop_words:
                counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise ValueError("corpus vocabulary is empty after stop-word removal")
    ordered = sorted(counts.items(), key=lambda e: (-e[1], e[0]))
    return FrequencyTable(entries=ordered[:f])


def filter_corpus(corpus: TextCorpus, spec: FilterSpec, num_classes: int) -> FilteredCorpus:
    """Partition the corpus: a caption is kept iff its tokens intersect the
    top-F word set. No record is mutated."""
    table = top_frequent(corpus, spec, num_classes)
    top_words = set(table.words())
    kept, dropped = [], []
    for rec in corpus.records:
        if top_words.intersection(tokenize(rec.text)):
            kept.append(rec)
        else:
            dropped.append((rec, DROP_REASON))
    return FilteredCorpus(
        kept=kept,
        dropped=dropped,
        top_f_words=table.words(),
        source=corpus,
        frequency_table=table,
    )


def passthrough_corpus(corpus: TextCorpus) -> FilteredCorpus:
    """Ablation arm: keep everything (filter disabled)."""
    return FilteredCorpus(kept=list(corpus.records), dropped=[], top_f_words=[], source=corpus)


def write_filtered(filtered: FilteredCorpus, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "filtered-corpus",
        "version": 1,
        "captioner_id": filtered.source.captioner_id,
        "seed": filtered.source.seed,
        "created_from": filtered.source.created_from,
        "top_f_words": filtered.top_f_words,
        "kept": len(filtered.kept),
        "dropped": len(filtered.dropped),
        "drop_reasons": sorted({reason for _, reason in filtered.dropped}),
    }
    lines = [canonical_json(header)]
    for rec in filtered.kept:
        lines.append(canonical_json({
            "sample_id": rec.sample_id, "caption_index": rec.caption_index,
            "text": rec.text, "status": "kept",
        }))
    for rec, reason in filtered.dropped:
        lines.append(canonical_json({
            "sample_id": rec.sample_id, "caption_index": rec.caption_index,
            "text": rec.text, "status": "dropped", "reason": reason,
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_filtered(path: Path | str) -> FilteredCorpus:
    import json

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "filtered-corpus":
        raise ValueError(f"not a filtered-corpus file: {path}")
    kept, dropped = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        record = CaptionRecord(rec["sample_id"], int(rec["caption_index"]), rec["text"])
        if rec["status"] == "kept":
            kept.append(record)
        else:
            dropped.append((record, rec.get("reason", DROP_REASON)))
    source = TextCorpus(
        records=kept + [r for r, _ in dropped],
        captioner_id=header.get("captioner_id", ""),
        created_from=header.get("created_from", ""),
        seed=int(header.get("seed", 0)),
    )
    return FilteredCorpus(
        kept=kept, dropped=dropped, top_f_words=list(header.get("top_f_words", [])),
        source=source,
    )


def write_frequency_report(table: FrequencyTable, path: Path | str) -> Path:
    """Two-column text file: word, count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join(f"{word}\t{count}\n" for word, count in table.entries), encoding="utf-8"
    )
    return path
