"""Pydantic request/response models for the serving API."""

from __future__ import annotations

import math

from pydantic import BaseModel, Field, model_validator


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateRequest(BaseModel):
    num_users: int = Field(ge=1)
    num_items: int = Field(ge=1)
    factors: int = Field(ge=1)
    archetypes: int = Field(default=8, ge=1)
    angular_spread: float = Field(default=0.3, ge=0.0, le=math.pi)
    norm_low: float = Field(default=1.0, gt=0.0)
    norm_high: float = Field(default=2.0, gt=0.0)
    seed: int = 0
    users_path: str
    items_path: str


class GenerateResponse(BaseModel):
    users_path: str
    items_path: str
    num_users: int
    num_items: int
    factors: int
    seed: int
    elapsed_seconds: float


class BuildIndexRequest(BaseModel):
    users_file: str
    items_file: str
    clusters: int = Field(default=8, ge=1)
    block: int = Field(default=4096, ge=1)
    seed: int = 0
    max_iters: int = Field(default=100, ge=1)
    out: str


class BuildIndexResponse(BaseModel):
    out: str
    num_clusters: int
    num_items: int
    entry_count: int
    max_angle: list[float]
    cluster_sizes: list[int]
    elapsed_seconds: float


class RunRequest(BaseModel):
    users_file: str
    items_file: str
    k: int = Field(default=10, ge=1)
    clusters: int = Field(default=8, ge=1)
    block: int = Field(default=4096, ge=1)
    sample_frac: float = Field(default=0.001, gt=0.0, le=1.0)
    h0: float | None = Field(default=None, gt=0.0)
    seed: int = 0
    force: str | None = None
    topk_out: str | None = None
    report_out: str | None = None

    @model_validator(mode="after")
    def _check_force(self):
        if self.force not in (None, "index", "matmul"):
            raise ValueError("force must be 'index' or 'matmul'")
        return self


class StageTimings(BaseModel):
    cluster: float
    build: float
    estimate: float
    serve: float
    total: float


class RunResponse(BaseModel):
    decision: str
    forced: bool
    mean_visited: float
    pruning_fraction: float
    hw_factor: float
    h0: float
    sample_size: int
    overhead_fraction: float
    timings: StageTimings
    num_users: int
    num_items: int
    k: int
    clusters: int
    block: int
    seed: int
    topk_out: str | None
    report_out: str | None


class PointRequest(BaseModel):
    users_file: str
    items_file: str
    index_file: str
    k: int = Field(default=10, ge=1)
    user_id: int | None = Field(default=None, ge=0)
    vector: list[float] | None = None

    @model_validator(mode="after")
    def _check_target(self):
        if (self.user_id is None) == (self.vector is None):
            raise ValueError("provide exactly one of user_id or vector")
        return self


class PointEntry(BaseModel):
    item_id: int
    score: float


class PointResponse(BaseModel):
    entries: list[PointEntry]
    visited: int
    latency_us: float


class SweepRequest(BaseModel):
    users_file: str
    items_file: str
    c_list: list[int] = Field(min_length=1)
    k: int = Field(default=10, ge=1)
    block: int = Field(default=4096, ge=1)
    seed: int = 0
    out: str | None = None


class SweepRow(BaseModel):
    clusters: int
    cluster_seconds: float
    serve_seconds: float
    w_bar: float


class SweepResponse(BaseModel):
    rows: list[SweepRow]
    out: str | None


class CalibrateRequest(BaseModel):
    users_file: str
    items_file: str
    k: int = Field(default=1, ge=1)
    repeats: int = Field(default=5, ge=1)
    config_out: str | None = None


class CalibrateResponse(BaseModel):
    h0: float
    repeats: int
    persisted_to: str | None
