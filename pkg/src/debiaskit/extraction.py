"""Bias-conflict candidate mining: rank training samples by loss and take
the top K. Ordering is total (loss descending, id ascending on ties) so the
extracted candidate set is reproducible."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .datasets import DatasetManifest
from .hashing import canonical_json

DEFAULT_TOP_K = 100


class RankingError(ValueError):
    pass


@dataclass
class LossRanking:
    entries: list[tuple[str, float]]  # (sample id, loss), sorted

    def ids(self) -> list[str]:
        return [sid for sid, _ in self.entries]


@dataclass
class ConflictCandidateSet:
    sample_ids: list[str]
    k: int
    source_model: str = ""  # checkpoint hash or path
    losses: dict[str, float] = field(default_factory=dict)


def rank(losses: Iterable[tuple[str, float]]) -> LossRanking:
    """Total order: loss descending, ties broken by id ascending.

    Rejects non-finite losses and duplicate ids, naming the sample.
    """
    entries = list(losses)
    seen: set[str] = set()
    for sid, value in entries:
        if sid in seen:
            raise RankingError(f"duplicate sample id in loss list: {sid!r}")
        seen.add(sid)
        if not math.isfinite(value):
            raise RankingError(f"non-finite loss for sample {sid!r}: {value}")
    entries.sort(key=lambda e: (-e[1], e[0]))
    return LossRanking(entries=entries)


def extract_topk(
    ranking: LossRanking,
    k: int = DEFAULT_TOP_K,
    source_model: str = "",
    per_class: Optional[tuple[DatasetManifest, int]] = None,
) -> ConflictCandidateSet:
    """First min(k, n) entries of the ranking.

    ``per_class`` optionally balances the selection: (manifest, k) takes the
    top k of each class instead of a single global k. Off by default.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if per_class is None:
        chosen = ranking.entries[: min(k, len(ranking.entries))]
    else:
        manifest, per_k = per_class
        label_of = {s.id: s.label for s in manifest.samples}
        taken: dict[int, int] = {}
        chosen = []
        for sid, value in ranking.entries:
            label = label_of[sid]
            if taken.get(label, 0) < per_k:
                chosen.append((sid, value))
                taken[label] = taken.get(label, 0) + 1
    return ConflictCandidateSet(
        sample_ids=[sid for sid, _ in chosen],
        k=k,
        source_model=source_model,
        losses=dict(chosen),
    )


def extraction_purity(
    candidates: ConflictCandidateSet, manifest: DatasetManifest
) -> Optional[float]:
    """Fraction of candidates whose true group is conflict.

    Diagnostic only; returns None when any candidate's group is unknown
    (real datasets without ground-truth groups).
    """
    group_of = {s.id: s.group for s in manifest.samples}
    groups = [group_of[sid] for sid in candidates.sample_ids]
    if not groups or any(g == "unknown" for g in groups):
        return None
    return sum(1 for g in groups if g == "conflict") / len(groups)


def write_candidates(candidates: ConflictCandidateSet, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "conflict-candidates",
        "version": 1,
        "k": candidates.k,
        "source_model": candidates.source_model,
    }
    lines = [canonical_json(header)]
    for sid in candidates.sample_ids:
        lines.append(canonical_json({"id": sid, "loss": candidates.losses.get(sid)}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_candidates(path: Path | str) -> ConflictCandidateSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "conflict-candidates":
        raise ValueError(f"not a candidate-set file: {path}")
    ids, losses = [], {}
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        ids.append(rec["id"])
        if rec.get("loss") is not None:
            losses[rec["id"]] = float(rec["loss"])
    return ConflictCandidateSet(
        sample_ids=ids, k=int(header["k"]), source_model=header.get("source_model", ""),
        losses=losses,
    )
