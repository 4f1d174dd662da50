"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field, model_validator


class HealthResponse(BaseModel):
    status: str
    version: str


class RunCreateRequest(BaseModel):
    config: Optional[dict] = Field(default=None, description="Inline experiment config")
    config_path: Optional[str] = Field(default=None, description="Path to a YAML/JSON config")
    run_dir: Optional[str] = Field(
        default=None, description="Run directory; defaults to a new directory under the runs root"
    )
    seed: Optional[int] = None
    deterministic: Optional[bool] = None
    trials: Optional[int] = None
    resume: bool = False

    @model_validator(mode="after")
    def _one_config_source(self):
        if (self.config is None) == (self.config_path is None):
            raise ValueError("provide exactly one of config / config_path")
        return self


class StageRecordModel(BaseModel):
    status: str
    input_hash: str
    outputs: list[dict] = []
    output_hash: str = ""
    wall_time_s: float = 0.0
    energy_kwh: float = 0.0
    info: dict = {}
    error: Optional[str] = None
    cached: bool = False


class RunResponse(BaseModel):
    run_id: str
    run_dir: str
    created_at: str
    stages: dict[str, StageRecordModel] = {}
    trials: list[str] = []


class RunListResponse(BaseModel):
    runs: list[RunResponse]


class RunAllRequest(BaseModel):
    resume: bool = True


class StageResponse(BaseModel):
    run_id: str
    stage: str
    record: StageRecordModel


class MetricsResponse(BaseModel):
    run_id: str
    metrics: dict[str, Any]


class ReportResponse(BaseModel):
    run_id: str
    rows: list[dict]
    files: dict[str, str]


class ErrorResponse(BaseModel):
    detail: str
