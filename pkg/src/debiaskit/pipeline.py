"""Experiment orchestration: declarative config, stage execution with
content-hash caching, run-directory persistence, and the end-to-end run.

A run directory is self-contained: every stage writes its artifacts under it
and records their hashes in run.json. A stage re-executes only when the
hash of its inputs (config slice plus upstream artifact hashes) changes;
otherwise it is skipped with cached status, which is also what makes
interrupted runs resumable.

Stage order (train-vanilla is the comparison baseline arm, trained on the
original dataset with plain cross-entropy):

    synth -> train-biased -> train-vanilla -> extract -> caption -> filter
    -> generate -> assemble -> train-debiased -> evaluate -> report
"""

from __future__ import annotations

import dataclasses
import json
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch

from . import backends
from .captioning import build_corpus, read_corpus, write_corpus
from .datasets import (
    DatasetManifest,
    SynthShapesSpec,
    load_manifest,
    manifest_content_hash,
    synth_generate,
    validate_composition,
)
from .energy import (
    DEFAULT_CARBON_INTENSITY_G_PER_KWH,
    EnergyLedger,
    estimate_energy_kwh,
    write_ledger,
)
from .evaluation import evaluate, export_embeddings
from .extraction import (
    extract_topk,
    extraction_purity,
    rank,
    read_candidates,
    write_candidates,
)
from .generation import (
    amplify,
    assemble_debiased,
    class_vocab_from_manifest,
    read_generated,
    write_generated,
)
from .hashing import canonical_json, derive_seed, file_sha256, stable_hash
from .imaging import SHAPE_SYNONYMS
from .reporting import RunSummary, write_comparison
from .textfilter import (
    FilterSpec,
    filter_corpus,
    passthrough_corpus,
    read_filtered,
    write_filtered,
    write_frequency_report,
)
from .training import ClassifierConfig, TrainedModel, per_sample_losses, train

STAGES = (
    "synth",
    "train-biased",
    "train-vanilla",
    "extract",
    "caption",
    "filter",
    "generate",
    "assemble",
    "train-debiased",
    "evaluate",
    "report",
)

# Stages each stage needs completed before it can run (train-vanilla is
# optional for evaluate: it is the run-all baseline arm).
STAGE_READS: dict[str, tuple[str, ...]] = {
    "synth": (),
    "train-biased": ("synth",),
    "train-vanilla": ("synth",),
    "extract": ("synth", "train-biased"),
    "caption": ("synth", "extract"),
    "filter": ("synth", "caption"),
    "generate": ("synth", "filter"),
    "assemble": ("synth", "generate"),
    "train-debiased": ("assemble",),
    "evaluate": ("synth", "train-biased", "train-debiased"),
    "report": ("evaluate",),
}
OPTIONAL_READS: dict[str, tuple[str, ...]] = {
    "evaluate": ("train-vanilla",),
    "assemble": ("extract",),
}


class PipelineError(RuntimeError):
    pass


class MissingUpstreamError(PipelineError):
    def __init__(self, stage: str, missing: str):
        super().__init__(
            f"stage {stage!r} requires completed upstream stage {missing!r}"
        )
        self.stage = stage
        self.missing = missing


class StageFailedError(PipelineError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    manifest_path: Optional[str] = None
    synth: Optional[SynthShapesSpec] = None

    def validate(self) -> None:
        if (self.manifest_path is None) == (self.synth is None):
            raise ValueError("dataset section needs exactly one of manifest_path / synth")
        if self.synth is not None:
            self.synth.validate()


@dataclass
class ExtractionConfig:
    k: int = 100
    ranking_loss: str = "CE"  # the selection rule scores by CE; GCE available
    q: float = 0.7
    per_class: bool = False

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"extraction k must be >= 1, got {self.k}")
        if self.ranking_loss not in ("CE", "GCE"):
            raise ValueError(f"ranking_loss must be CE or GCE, got {self.ranking_loss!r}")


@dataclass
class CaptionConfig:
    backend: str = "oracle"
    m: int = 3
    parallelism: int = 4
    endpoint: Optional[str] = None
    timeout_s: float = 10.0
    max_retries: int = 3

    def validate(self) -> None:
        if self.backend not in backends.captioner_ids():
            raise ValueError(
                f"unregistered captioner backend {self.backend!r}; "
                f"known: {backends.captioner_ids()}"
            )
        if self.m < 1 or self.parallelism < 1:
            raise ValueError("caption m and parallelism must be >= 1")


@dataclass
class FilterConfig:
    enabled: bool = True
    f: Union[int, str] = "auto"
    stop_words: Optional[list[str]] = None
    emit_report: bool = True

    def validate(self) -> None:
        if self.f != "auto" and int(self.f) < 1:
            raise ValueError(f"filter F must be >= 1 or 'auto', got {self.f!r}")


@dataclass
class GenerationConfig:
    backend: str = "oracle"
    target: Union[int, str] = "balance"
    size: int = 64
    parallelism: int = 4
    endpoint: Optional[str] = None
    timeout_s: float = 30.0
    max_retries: int = 3
    oversample_topk: bool = False
    class_vocab: Optional[dict[int, list[str]]] = None

    def validate(self) -> None:
        if self.backend not in backends.generator_ids():
            raise ValueError(
                f"unregistered generator backend {self.backend!r}; "
                f"known: {backends.generator_ids()}"
            )
        if self.target != "balance" and int(self.target) < 1:
            raise ValueError(f"generation target must be 'balance' or >= 1, got {self.target!r}")
        if self.size < 8:
            raise ValueError(f"generation size must be >= 8, got {self.size}")


@dataclass
class EvalConfig:
    trials: int = 1
    export_embeddings: bool = True

    def validate(self) -> None:
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")


@dataclass
class EnergyConfig:
    device_watts: float = 65.0
    carbon_intensity: float = DEFAULT_CARBON_INTENSITY_G_PER_KWH

    def validate(self) -> None:
        if self.device_watts < 0 or self.carbon_intensity < 0:
            raise ValueError("energy parameters must be >= 0")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    biased_training: ClassifierConfig
    debias_training: ClassifierConfig
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    seed: int = 0
    deterministic: bool = False

    def validate(self) -> None:
        self.dataset.validate()
        self.biased_training.validate()
        self.debias_training.validate()
        self.extraction.validate()
        self.caption.validate()
        self.filter.validate()
        self.generation.validate()
        self.eval.validate()
        self.energy.validate()

    def resolved(self) -> "ExperimentConfig":
        """Fill every derived seed from the global seed so the snapshot alone
        determines all stage outputs.

        The synthetic dataset keeps its own seed: trial repetitions vary the
        training/caption/generation seeds while evaluating on one dataset,
        matching the usual multiple-trials protocol.
        """
        cfg = config_from_dict(self.to_dict())
        cfg.biased_training.seed = derive_seed(cfg.seed, "train-biased")
        cfg.debias_training.seed = derive_seed(cfg.seed, "train-debiased")
        return cfg

    def to_dict(self) -> dict:
        return {
            "dataset": {
                "manifest_path": self.dataset.manifest_path,
                "synth": self.dataset.synth.to_dict() if self.dataset.synth else None,
            },
            "biased_training": self.biased_training.to_dict(),
            "debias_training": self.debias_training.to_dict(),
            "extraction": dataclasses.asdict(self.extraction),
            "caption": dataclasses.asdict(self.caption),
            "filter": dataclasses.asdict(self.filter),
            "generation": dataclasses.asdict(self.generation),
            "eval": dataclasses.asdict(self.eval),
            "energy": dataclasses.asdict(self.energy),
            "seed": self.seed,
            "deterministic": self.deterministic,
        }


def _training_config(section: Optional[dict], loss_mode: str) -> ClassifierConfig:
    base = ClassifierConfig(
        architecture_id="tiny-cnn",
        input_size=32,
        epochs=10,
        batch_size=64,
        base_lr=0.02,
        loss_mode=loss_mode,  # type: ignore[arg-type]
    )
    if not section:
        return base
    merged = base.to_dict()
    merged.update({k: v for k, v in section.items() if v is not None})
    return ClassifierConfig.from_dict(merged)


def config_from_dict(raw: dict) -> ExperimentConfig:
    dataset_raw = raw.get("dataset") or {}
    synth_raw = dataset_raw.get("synth")
    dataset = DatasetConfig(
        manifest_path=dataset_raw.get("manifest_path"),
        synth=SynthShapesSpec.from_dict(synth_raw) if synth_raw else None,
    )

    def section(name: str, cls, **defaults):
        data = dict(defaults)
        data.update(raw.get(name) or {})
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ValueError(f"unknown keys in {name!r} section: {sorted(unknown)}")
        return cls(**data)

    generation = section("generation", GenerationConfig)
    if generation.class_vocab is not None:
        generation.class_vocab = {int(k): list(v) for k, v in generation.class_vocab.items()}

    cfg = ExperimentConfig(
        dataset=dataset,
        biased_training=_training_config(raw.get("biased_training"), "GCE"),
        debias_training=_training_config(raw.get("debias_training"), "CE"),
        extraction=section("extraction", ExtractionConfig),
        caption=section("caption", CaptionConfig),
        filter=section("filter", FilterConfig),
        generation=generation,
        eval=section("eval", EvalConfig),
        energy=section("energy", EnergyConfig),
        seed=int(raw.get("seed", 0)),
        deterministic=bool(raw.get("deterministic", False)),
    )
    cfg.validate()
    return cfg


def config_from_file(path: Path | str) -> ExperimentConfig:
    import yaml

    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} does not hold a mapping")
    return config_from_dict(raw)


def default_synth_config(seed: int = 0, **synth_overrides) -> ExperimentConfig:
    """Desk-scale defaults: tiny conv net, 10 epochs, oracle backends."""
    spec = SynthShapesSpec(seed=seed)
    for key, value in synth_overrides.items():
        setattr(spec, key, value)
    cfg = ExperimentConfig(
        dataset=DatasetConfig(synth=spec),
        biased_training=_training_config(None, "GCE"),
        debias_training=_training_config(None, "CE"),
        generation=GenerationConfig(size=spec.image_size),
        seed=seed,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    status: str  # completed | failed
    input_hash: str
    outputs: list[dict] = field(default_factory=list)  # {path, sha256}
    output_hash: str = ""
    wall_time_s: float = 0.0
    energy_kwh: float = 0.0
    info: dict = field(default_factory=dict)
    error: Optional[str] = None
    cached: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(**d)


@dataclass
class RunRecord:
    run_id: str
    run_dir: Path
    config: dict  # resolved snapshot
    stages: dict[str, StageRecord] = field(default_factory=dict)
    trials: list[str] = field(default_factory=list)  # trial sub-run dirs
    created_at: str = ""

    def save(self) -> None:
        payload = {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "config": self.config,
            "stages": {name: rec.to_dict() for name, rec in self.stages.items()},
            "trials": self.trials,
        }
        path = self.run_dir / "run.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, run_dir: Path | str) -> "RunRecord":
        run_dir = Path(run_dir)
        payload = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
        rec = cls(
            run_id=payload["run_id"],
            run_dir=run_dir,
            config=payload["config"],
            created_at=payload.get("created_at", ""),
            trials=list(payload.get("trials", [])),
        )
        rec.stages = {
            name: StageRecord.from_dict(d) for name, d in payload.get("stages", {}).items()
        }
        return rec


def create_run(run_dir: Path | str, config: ExperimentConfig, resume: bool = False) -> RunRecord:
    """Initialize (or reopen, with resume=True) a run directory."""
    run_dir = Path(run_dir)
    run_path = run_dir / "run.json"
    resolved = config.resolved()
    # Round-trip through JSON so snapshots compare equal after reload.
    snapshot = json.loads(canonical_json(resolved.to_dict()))
    if run_path.exists():
        record = RunRecord.load(run_dir)
        if record.config != snapshot:
            raise PipelineError(
                f"run dir {run_dir} was initialized with a different config; "
                "use a fresh directory"
            )
        if not resume and record.stages:
            raise PipelineError(
                f"run dir {run_dir} already has stage results; pass resume=True "
                "(--resume) to continue it"
            )
        return record
    run_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(
        run_id=f"run-{uuid.uuid4().hex[:12]}",
        run_dir=run_dir,
        config=snapshot,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    record.save()
    (run_dir / "config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return record


# ---------------------------------------------------------------------------
# Stage execution
# ---------------------------------------------------------------------------

def _config_slice(config: ExperimentConfig, stage: str) -> dict:
    d = config.to_dict()
    common = {"deterministic": d["deterministic"], "seed": d["seed"]}
    slices = {
        "synth": {"dataset": d["dataset"]},
        "train-biased": {"training": d["biased_training"]},
        "train-vanilla": {"training": d["debias_training"], "role": "vanilla"},
        "extract": {"extraction": d["extraction"]},
        "caption": {"caption": d["caption"]},
        "filter": {"filter": d["filter"]},
        "generate": {"generation": d["generation"]},
        "assemble": {"oversample_topk": d["generation"]["oversample_topk"]},
        "train-debiased": {"training": d["debias_training"]},
        "evaluate": {"eval": d["eval"]},
        "report": {},
    }
    out = dict(slices[stage])
    out.update(common)
    return out


def _input_hash(record: RunRecord, config: ExperimentConfig, stage: str) -> str:
    parts = [stage, canonical_json(_config_slice(config, stage))]
    for dep in STAGE_READS[stage] + OPTIONAL_READS.get(stage, ()):
        rec = record.stages.get(dep)
        if rec is not None and rec.status == "completed":
            parts.append(f"{dep}:{rec.output_hash}")
    return stable_hash(*parts)


def _check_upstream(record: RunRecord, stage: str) -> None:
    for dep in STAGE_READS[stage]:
        rec = record.stages.get(dep)
        if rec is None or rec.status != "completed":
            raise MissingUpstreamError(stage, dep)


def _outputs_exist(record: RunRecord, rec: StageRecord) -> bool:
    return all((record.run_dir / o["path"]).exists() for o in rec.outputs)


def _load_dataset(record: RunRecord, config: ExperimentConfig) -> DatasetManifest:
    if config.dataset.synth is not None:
        return load_manifest(record.run_dir / "dataset" / "manifest.jsonl")
    return load_manifest(Path(config.dataset.manifest_path))


def _rel(record: RunRecord, path: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(record.run_dir.resolve()))
    except ValueError:
        return str(Path(path).resolve())


class _StageOutput:
    """Collects a stage's artifacts: which files downstream consumes (hashed)
    and which are informational (logs)."""

    def __init__(self, record: RunRecord):
        self.record = record
        self.outputs: list[dict] = []
        self.hash_parts: list[str] = []
        self.info: dict = {}

    def add(self, path: Path, hashed: bool = True, extra_hash: Optional[str] = None) -> None:
        digest = file_sha256(path)
        self.outputs.append({"path": _rel(self.record, path), "sha256": digest})
        if hashed:
            self.hash_parts.append(extra_hash or digest)

    def output_hash(self) -> str:
        return stable_hash(*self.hash_parts) if self.hash_parts else stable_hash("empty")


def _stage_synth(record: RunRecord, config: ExperimentConfig, out: _StageOutput) -> None:
    if config.dataset.synth is not None:
        manifest = synth_generate(config.dataset.synth, record.run_dir / "dataset")
        path = record.run_dir / "dataset" / "manifest.jsonl"
    else:
        path = Path(config.dataset.manifest_path)
        manifest = load_manifest(path)
    content = manifest_content_hash(manifest)
    out.add(path, hashed=True, extra_hash=content)
    report = validate_composition(manifest)
    out.info = {
        "n_samples": report.n_samples,
        "train_counts": report.train_counts,
        "test_counts": report.test_counts,
        "realized_conflict_ratio": report.realized_conflict_ratio,
        "content_hash": content,
    }


def _run_training_stage(
    record: RunRecord, config: ExperimentConfig, out: _StageOutput,
    manifest: DatasetManifest, train_cfg: ClassifierConfig, role: str, stage: str,
) -> None:
    ckpt = record.run_dir / "checkpoints" / f"{role}.pt"
    log = record.run_dir / "logs" / f"{stage}.jsonl"
    log.parent.mkdir(parents=True, exist_ok=True)
    model = train(
        manifest, train_cfg, ckpt, role_tag=role, log_path=log,
        deterministic=config.deterministic,
    )
    out.add(ckpt, hashed=True)
    out.add(log, hashed=False)
    out.info = {"epochs": len(model.history), "final_mean_loss": model.history[-1].mean_loss}


def _stage_train_biased(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    _run_training_stage(record, config, out, manifest, config.biased_training,
                        "biased", "train-biased")


def _stage_train_vanilla(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    cfg = ClassifierConfig.from_dict(config.debias_training.to_dict())
    cfg.seed = derive_seed(config.seed, "train-vanilla")
    _run_training_stage(record, config, out, manifest, cfg, "vanilla", "train-vanilla")


def _stage_extract(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    ckpt = record.run_dir / "checkpoints" / "biased.pt"
    model = TrainedModel.from_checkpoint(ckpt)
    losses = per_sample_losses(
        model, manifest, loss_mode=config.extraction.ranking_loss, q=config.extraction.q
    )
    ranking = rank(losses)
    per_class = (manifest, config.extraction.k) if config.extraction.per_class else None
    candidates = extract_topk(
        ranking, config.extraction.k, source_model=file_sha256(ckpt), per_class=per_class
    )
    path = write_candidates(candidates, record.run_dir / "extraction" / "candidates.jsonl")
    out.add(path, hashed=True)
    purity = extraction_purity(candidates, manifest)
    out.info = {"k": config.extraction.k, "n_candidates": len(candidates.sample_ids),
                "purity": purity}


def _stage_caption(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    candidates_path = record.run_dir / "extraction" / "candidates.jsonl"
    candidates = read_candidates(candidates_path)
    candidates.source_model = file_sha256(candidates_path)
    kwargs = {}
    if config.caption.backend == "external-http":
        kwargs = {
            "base_url": config.caption.endpoint,
            "timeout_s": config.caption.timeout_s,
            "max_retries": config.caption.max_retries,
        }
    captioner = backends.make_captioner(config.caption.backend, **kwargs)
    corpus = build_corpus(
        candidates, manifest, captioner, m=config.caption.m,
        seed=derive_seed(config.seed, "caption"), parallelism=config.caption.parallelism,
    )
    path = write_corpus(corpus, record.run_dir / "captions" / "corpus.jsonl")
    out.add(path, hashed=True)
    out.info = {"records": len(corpus.records), "failures": len(corpus.failures),
                "captioner_id": corpus.captioner_id}


def _stage_filter(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    corpus = read_corpus(record.run_dir / "captions" / "corpus.jsonl")
    if config.filter.enabled:
        if config.filter.stop_words is not None:
            spec = FilterSpec(
                stop_words=frozenset(w.lower() for w in config.filter.stop_words),
                f=config.filter.f,
            )
        else:
            spec = FilterSpec(f=config.filter.f)
        filtered = filter_corpus(corpus, spec, manifest.num_classes)
        if config.filter.emit_report:
            report_path = write_frequency_report(
                filtered.frequency_table, record.run_dir / "captions" / "frequency.txt"
            )
            out.add(report_path, hashed=False)
    else:
        filtered = passthrough_corpus(corpus)
    path = write_filtered(filtered, record.run_dir / "captions" / "filtered.jsonl")
    out.add(path, hashed=True)
    out.info = {
        "enabled": config.filter.enabled,
        "kept": len(filtered.kept),
        "dropped": len(filtered.dropped),
        "top_f_words": filtered.top_f_words,
    }


def _stage_generate(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    filtered = read_filtered(record.run_dir / "captions" / "filtered.jsonl")
    kwargs = {}
    if config.generation.backend == "external-http":
        kwargs = {
            "base_url": config.generation.endpoint,
            "timeout_s": config.generation.timeout_s,
            "max_retries": config.generation.max_retries,
        }
    generator = backends.make_generator(config.generation.backend, **kwargs)
    if config.generation.class_vocab is not None:
        vocab = {c: set(words) for c, words in config.generation.class_vocab.items()}
    else:
        vocab = class_vocab_from_manifest(manifest, synonyms=SHAPE_SYNONYMS)
    samples, stats = amplify(
        filtered, generator, vocab, config.generation.target, config.generation.size,
        seed=derive_seed(config.seed, "generate"), source_manifest=manifest,
        out_dir=record.run_dir / "generated", parallelism=config.generation.parallelism,
    )
    provenance = {
        "corpus_sha256": file_sha256(record.run_dir / "captions" / "filtered.jsonl"),
        "generator_id": generator.descriptor.id,
        "manifest_content_hash": manifest_content_hash(manifest),
    }
    path = write_generated(samples, stats, record.run_dir / "generated" / "generated.jsonl",
                           provenance=provenance)
    image_hashes = [file_sha256(record.run_dir / "generated" / s.image_path) for s in samples]
    out.add(path, hashed=True, extra_hash=stable_hash(file_sha256(path), *image_hashes))
    out.info = {
        "requested": stats.requested,
        "generated": stats.generated,
        "skipped_no_label": stats.skipped_no_label,
        "failed_captions": stats.failed_captions,
        "per_label_counts": {str(k): v for k, v in sorted(stats.per_label_counts.items())},
    }


def _stage_assemble(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    generated, _header = read_generated(record.run_dir / "generated" / "generated.jsonl")
    oversample = None
    if config.generation.oversample_topk:
        oversample = read_candidates(
            record.run_dir / "extraction" / "candidates.jsonl"
        ).sample_ids
    debiased = assemble_debiased(
        manifest, generated, generated_root=record.run_dir / "generated",
        out_dir=record.run_dir / "debiased",
        provenance={
            "original_content_hash": manifest_content_hash(manifest),
            "generated_sha256": file_sha256(record.run_dir / "generated" / "generated.jsonl"),
        },
        oversample_candidates=oversample,
    )
    path = record.run_dir / "debiased" / "manifest.jsonl"
    out.add(path, hashed=True, extra_hash=manifest_content_hash(debiased.manifest))
    report = validate_composition(debiased.manifest)
    out.info = {
        "n_samples": report.n_samples,
        "train_counts": report.train_counts,
        "provenance": debiased.provenance,
    }


def _stage_train_debiased(record, config, out) -> None:
    manifest = load_manifest(record.run_dir / "debiased" / "manifest.jsonl")
    _run_training_stage(record, config, out, manifest, config.debias_training,
                        "debiased", "train-debiased")


def _metrics_lines(metrics: dict[str, object]) -> str:
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            lines.append(f"{key}={value!r}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_metrics_file(path: Path | str) -> dict[str, object]:
    out: dict[str, object] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        if raw == "None":
            out[key] = None
        else:
            try:
                out[key] = json.loads(raw)
            except json.JSONDecodeError:
                out[key] = raw
    return out


def _stage_evaluate(record, config, out) -> None:
    manifest = _load_dataset(record, config)
    metrics: dict[str, object] = {}
    roles = ["biased", "debiased"]
    if (record.run_dir / "checkpoints" / "vanilla.pt").exists():
        roles.insert(0, "vanilla")
    for role in roles:
        model = TrainedModel.from_checkpoint(record.run_dir / "checkpoints" / f"{role}.pt")
        test = evaluate(model, manifest, split="test")
        for key, value in test.to_dict().items():
            if key == "per_class_acc":
                for c, acc in enumerate(value):
                    metrics[f"{role}.test.class{c}_acc"] = acc
            else:
                metrics[f"{role}.test.{key}"] = value
        if role == "biased":
            train_m = evaluate(model, manifest, split="train")
            metrics["biased.train.overall_acc"] = train_m.overall_acc
            metrics["biased.train.aligned_acc"] = train_m.aligned_acc
            metrics["biased.train.conflict_acc"] = train_m.conflict_acc
        if config.eval.export_embeddings:
            emb = export_embeddings(
                model, manifest, record.run_dir / "metrics" / f"embeddings_{role}.jsonl",
                split="test",
            )
            out.add(emb, hashed=False)
    extract_rec = record.stages.get("extract")
    if extract_rec and extract_rec.info.get("purity") is not None:
        metrics["extract.purity"] = extract_rec.info["purity"]
    comp = validate_composition(manifest)
    metrics["dataset.realized_conflict_ratio"] = comp.realized_conflict_ratio
    metrics["dataset.n_samples"] = comp.n_samples
    path = record.run_dir / "metrics" / "metrics.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_metrics_lines(metrics), encoding="utf-8")
    out.add(path, hashed=True)
    out.info = {"metrics": metrics, "roles": roles}


def _energy_ledger(record: RunRecord, config: ExperimentConfig) -> EnergyLedger:
    from fractions import Fraction

    ledger = EnergyLedger(carbon_intensity=Fraction(config.energy.carbon_intensity))
    for name in STAGES:
        rec = record.stages.get(name)
        if rec is not None and rec.status == "completed":
            ledger.add(name, Fraction(rec.energy_kwh), Fraction(rec.wall_time_s) / 3600)
    return ledger


def _stage_report(record, config, out) -> None:
    metrics = parse_metrics_file(record.run_dir / "metrics" / "metrics.txt")
    ledger = _energy_ledger(record, config)
    from .energy import carbon_report

    report = carbon_report(ledger)
    grams_total = float(report.total_grams)
    roles = [r for r in ("vanilla", "biased", "debiased")
             if any(k.startswith(f"{r}.") for k in metrics)]
    summaries = []
    train_stage_of = {"vanilla": "train-vanilla", "biased": "train-biased",
                      "debiased": "train-debiased"}
    stage_grams = {s: float(g) for s, g in report.per_stage}
    for role in roles:
        stage = train_stage_of[role]
        rec = record.stages.get(stage)
        summaries.append(RunSummary(
            name=role,
            metrics={
                "overall_acc": metrics.get(f"{role}.test.overall_acc"),
                "aligned_acc": metrics.get(f"{role}.test.aligned_acc"),
                "conflict_acc": metrics.get(f"{role}.test.conflict_acc"),
            },
            energy_kwh=rec.energy_kwh if rec else None,
            duration_hours=rec.wall_time_s / 3600 if rec else None,
            carbon_grams=stage_grams.get(stage),
        ))
    paths = write_comparison(summaries, record.run_dir / "report")
    for p in paths.values():
        out.add(p, hashed=(p.suffix == ".json"))
    out.info = {"roles": roles, "total_carbon_grams": grams_total}


_STAGE_FUNCS = {
    "synth": _stage_synth,
    "train-biased": _stage_train_biased,
    "train-vanilla": _stage_train_vanilla,
    "extract": _stage_extract,
    "caption": _stage_caption,
    "filter": _stage_filter,
    "generate": _stage_generate,
    "assemble": _stage_assemble,
    "train-debiased": _stage_train_debiased,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_stage(record: RunRecord, config: ExperimentConfig, stage: str) -> StageRecord:
    """Execute one stage, or skip it with cached status when its inputs are
    unchanged since a prior completion."""
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage {stage!r}; known: {STAGES}")
    _check_upstream(record, stage)
    input_hash = _input_hash(record, config, stage)
    existing = record.stages.get(stage)
    if (
        existing is not None
        and existing.status == "completed"
        and existing.input_hash == input_hash
        and _outputs_exist(record, existing)
    ):
        existing.cached = True
        record.save()
        return existing

    out = _StageOutput(record)
    t0 = time.monotonic()
    try:
        _STAGE_FUNCS[stage](record, config, out)
    except Exception as e:
        wall = time.monotonic() - t0
        record.stages[stage] = StageRecord(
            status="failed", input_hash=input_hash, wall_time_s=wall,
            error=f"{type(e).__name__}: {e}",
        )
        record.save()
        raise StageFailedError(stage, e) from e
    wall = time.monotonic() - t0
    rec = StageRecord(
        status="completed",
        input_hash=input_hash,
        outputs=out.outputs,
        output_hash=out.output_hash(),
        wall_time_s=wall,
        energy_kwh=float(estimate_energy_kwh(wall, config.energy.device_watts)),
        info=out.info,
        cached=False,
    )
    record.stages[stage] = rec
    record.save()
    write_ledger(_energy_ledger(record, config), record.run_dir / "energy.json")
    return rec


def compare_runs(run_dirs: list[Path | str], out_dir: Path | str) -> list[RunSummary]:
    """Cross-run comparison: one row per run directory, values copied from
    each run's stored metrics and energy ledger (nothing recomputed)."""
    from .energy import carbon_report, read_ledger

    summaries = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        record = RunRecord.load(run_dir)
        metrics_path = run_dir / "metrics" / "metrics.txt"
        metrics = parse_metrics_file(metrics_path) if metrics_path.exists() else {}
        prefix = "mean.debiased.test." if any(
            k.startswith("mean.") for k in metrics
        ) else "debiased.test."
        row_metrics = {
            "overall_acc": metrics.get(prefix + "overall_acc"),
            "aligned_acc": metrics.get(prefix + "aligned_acc"),
            "conflict_acc": metrics.get(prefix + "conflict_acc"),
        }
        energy_kwh = duration = grams = None
        energy_path = run_dir / "energy.json"
        if energy_path.exists():
            ledger = read_ledger(energy_path)
            energy_kwh = float(ledger.total_kwh())
            duration = float(sum((e.duration_hours for e in ledger.entries), 0))
            grams = float(carbon_report(ledger).total_grams)
        summaries.append(RunSummary(
            name=record.run_id, metrics=row_metrics,
            energy_kwh=energy_kwh, duration_hours=duration, carbon_grams=grams,
        ))
    write_comparison(summaries, out_dir)
    return summaries


def run_all(
    run_dir: Path | str,
    config: ExperimentConfig,
    resume: bool = False,
) -> RunRecord:
    """Full pipeline plus the vanilla baseline arm; with eval.trials > 1 the
    whole pipeline repeats per trial seed (seed + i) in trial sub-runs and the
    parent aggregates their metrics."""
    config.validate()
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    if config.eval.trials > 1:
        return _run_trials(Path(run_dir), config, resume=resume)
    record = create_run(run_dir, config, resume=resume)
    resolved = config_from_dict(record.config)
    for stage in STAGES:
        run_stage(record, resolved, stage)
    return record


def _run_trials(run_dir: Path, config: ExperimentConfig, resume: bool) -> RunRecord:
    record = create_run(run_dir, config, resume=resume)
    trials = config.eval.trials
    trial_metrics: list[dict[str, object]] = []
    trial_dirs = []
    for i in range(trials):
        raw = config.to_dict()
        raw["seed"] = config.seed + i
        raw["eval"] = dict(raw["eval"], trials=1)
        trial_cfg = config_from_dict(raw)
        trial_dir = run_dir / f"trial-{i}"
        run_all(trial_dir, trial_cfg, resume=True)
        trial_dirs.append(trial_dir.name)
        trial_metrics.append(parse_metrics_file(trial_dir / "metrics" / "metrics.txt"))
    record.trials = trial_dirs

    aggregated: dict[str, object] = {}
    keys = sorted({k for m in trial_metrics for k in m})
    for key in keys:
        values = [m.get(key) for m in trial_metrics]
        for i, v in enumerate(values):
            aggregated[f"trial{i}.{key}"] = v
        numeric = [v for v in values if isinstance(v, (int, float))]
        if len(numeric) == len(values) and numeric:
            aggregated[f"mean.{key}"] = sum(numeric) / len(numeric)
    metrics_path = run_dir / "metrics" / "metrics.txt"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text(_metrics_lines(aggregated), encoding="utf-8")

    summaries = []
    for role in ("vanilla", "biased", "debiased"):
        if not any(k == f"mean.{role}.test.overall_acc" for k in aggregated):
            continue
        summaries.append(RunSummary(
            name=role,
            metrics={
                "overall_acc": aggregated.get(f"mean.{role}.test.overall_acc"),
                "aligned_acc": aggregated.get(f"mean.{role}.test.aligned_acc"),
                "conflict_acc": aggregated.get(f"mean.{role}.test.conflict_acc"),
            },
        ))
    if summaries:
        write_comparison(summaries, run_dir / "report")
    merged = EnergyLedger(carbon_intensity=_energy_ledger(record, config).carbon_intensity)
    for name in trial_dirs:
        trial_record = RunRecord.load(run_dir / name)
        trial_cfg = config_from_dict(trial_record.config)
        merged = merged.merged(_energy_ledger(trial_record, trial_cfg))
    write_ledger(merged, run_dir / "energy.json")
    record.save()
    return record
