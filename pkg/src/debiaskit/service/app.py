"""FastAPI app exposing the pipeline over HTTP.

Runs live under a runs root directory; one run directory has one writer.
Stage execution is synchronous: at desk scale stages finish in seconds to a
few minutes, and the caller gets the stage record (or a typed error) back.
"""

from __future__ import annotations

import json
import uuid
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..pipeline import (
    STAGES,
    ExperimentConfig,
    MissingUpstreamError,
    PipelineError,
    RunRecord,
    StageFailedError,
    config_from_dict,
    config_from_file,
    create_run,
    parse_metrics_file,
    run_all,
    run_stage,
)
from .schemas import (
    HealthResponse,
    MetricsResponse,
    ReportResponse,
    RunAllRequest,
    RunCreateRequest,
    RunListResponse,
    RunResponse,
    StageRecordModel,
    StageResponse,
)


def _run_response(record: RunRecord) -> RunResponse:
    return RunResponse(
        run_id=record.run_id,
        run_dir=str(record.run_dir),
        created_at=record.created_at,
        stages={k: StageRecordModel(**v.to_dict()) for k, v in record.stages.items()},
        trials=record.trials,
    )


class RunRegistry:
    """Maps run ids to run directories by scanning the runs root."""

    def __init__(self, runs_root: Path):
        self.runs_root = Path(runs_root)
        self.runs_root.mkdir(parents=True, exist_ok=True)
        self._extra: dict[str, Path] = {}  # runs created outside the root

    def track(self, record: RunRecord) -> None:
        self._extra[record.run_id] = record.run_dir

    def find(self, run_id: str) -> RunRecord:
        if run_id in self._extra and (self._extra[run_id] / "run.json").exists():
            return RunRecord.load(self._extra[run_id])
        for child in sorted(self.runs_root.iterdir()) if self.runs_root.exists() else []:
            run_json = child / "run.json"
            if run_json.is_file():
                try:
                    payload = json.loads(run_json.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    continue
                if payload.get("run_id") == run_id:
                    return RunRecord.load(child)
        raise HTTPException(status_code=404, detail=f"run {run_id!r} not found")

    def list_runs(self) -> list[RunRecord]:
        records = []
        seen = set()
        for path in list(self._extra.values()) + (
            sorted(self.runs_root.iterdir()) if self.runs_root.exists() else []
        ):
            run_json = Path(path) / "run.json"
            if run_json.is_file() and str(path) not in seen:
                seen.add(str(path))
                try:
                    records.append(RunRecord.load(path))
                except (json.JSONDecodeError, KeyError):
                    continue
        return records


def create_app(runs_root: Path | str = "runs") -> FastAPI:
    app = FastAPI(title="debiaskit", version=__version__)
    registry = RunRegistry(Path(runs_root))
    app.state.registry = registry

    def load_config(req: RunCreateRequest) -> ExperimentConfig:
        try:
            if req.config_path is not None:
                cfg = config_from_file(req.config_path)
            else:
                cfg = config_from_dict(req.config or {})
            raw = cfg.to_dict()
            if req.seed is not None:
                raw["seed"] = req.seed
            if req.deterministic is not None:
                raw["deterministic"] = req.deterministic
            if req.trials is not None:
                raw["eval"] = dict(raw["eval"], trials=req.trials)
            return config_from_dict(raw)
        except (ValueError, FileNotFoundError) as e:
            raise HTTPException(status_code=422, detail=str(e))

    def resolve_run_dir(req: RunCreateRequest) -> Path:
        if req.run_dir:
            return Path(req.run_dir)
        return registry.runs_root / f"run-{uuid.uuid4().hex[:8]}"

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/stages")
    def stages() -> dict:
        return {"stages": list(STAGES)}

    @app.get("/runs", response_model=RunListResponse)
    def list_runs() -> RunListResponse:
        return RunListResponse(runs=[_run_response(r) for r in registry.list_runs()])

    @app.post("/runs", response_model=RunResponse)
    def create(req: RunCreateRequest) -> RunResponse:
        cfg = load_config(req)
        try:
            record = create_run(resolve_run_dir(req), cfg, resume=req.resume)
        except PipelineError as e:
            raise HTTPException(status_code=409, detail=str(e))
        registry.track(record)
        return _run_response(record)

    @app.get("/runs/{run_id}", response_model=RunResponse)
    def get_run(run_id: str) -> RunResponse:
        return _run_response(registry.find(run_id))

    @app.post("/runs/{run_id}/stages/{stage}", response_model=StageResponse)
    def execute_stage(run_id: str, stage: str) -> StageResponse:
        record = registry.find(run_id)
        if stage not in STAGES:
            raise HTTPException(status_code=422, detail=f"unknown stage {stage!r}")
        cfg = config_from_dict(record.config)
        try:
            stage_record = run_stage(record, cfg, stage)
        except MissingUpstreamError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except StageFailedError as e:
            raise HTTPException(status_code=500, detail=str(e))
        return StageResponse(
            run_id=run_id, stage=stage, record=StageRecordModel(**stage_record.to_dict())
        )

    @app.post("/runs/{run_id}/run-all", response_model=RunResponse)
    def execute_all(run_id: str, req: Optional[RunAllRequest] = None) -> RunResponse:
        record = registry.find(run_id)
        cfg = config_from_dict(record.config)
        try:
            record = run_all(record.run_dir, cfg, resume=True if req is None else req.resume)
        except PipelineError as e:
            raise HTTPException(status_code=500, detail=str(e))
        return _run_response(record)

    @app.get("/runs/{run_id}/metrics", response_model=MetricsResponse)
    def metrics(run_id: str) -> MetricsResponse:
        record = registry.find(run_id)
        path = record.run_dir / "metrics" / "metrics.txt"
        if not path.exists():
            raise HTTPException(status_code=404, detail="metrics not produced yet")
        return MetricsResponse(run_id=run_id, metrics=parse_metrics_file(path))

    @app.get("/runs/{run_id}/report", response_model=ReportResponse)
    def report(run_id: str) -> ReportResponse:
        record = registry.find(run_id)
        path = record.run_dir / "report" / "comparison.json"
        if not path.exists():
            raise HTTPException(status_code=404, detail="report not produced yet")
        rows = json.loads(path.read_text(encoding="utf-8"))
        files = {
            p.name: str(p) for p in sorted((record.run_dir / "report").iterdir()) if p.is_file()
        }
        return ReportResponse(run_id=run_id, rows=rows, files=files)

    return app
