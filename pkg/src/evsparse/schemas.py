"""Pydantic request/response models for the inference service.

Binary inputs (model files) travel base64-encoded or as server-local paths;
event streams travel as canonical event-file text or paths. Reports carry
both structured rows and a pre-rendered CSV string so clients stay thin.
"""

from __future__ import annotations

from pydantic import BaseModel, Field

__all__ = [
    "CompareReport",
    "CompareRequest",
    "FlopsReport",
    "FlopsRequest",
    "FractalReport",
    "FractalRequest",
    "GenEventsRequest",
    "GenEventsResponse",
    "HealthResponse",
    "LedgerRowModel",
    "RandomModelRequest",
    "RandomModelResponse",
    "RunReport",
    "RunRequest",
    "SessionCreateRequest",
    "SessionInfo",
    "SessionPushRequest",
    "SessionPushResponse",
]


class HealthResponse(BaseModel):
    status: str
    version: str


class GenEventsRequest(BaseModel):
    synthetic: str | None = None
    frames_dir: str | None = None
    threshold: float = Field(gt=0)
    width: int = Field(default=64, gt=0)
    height: int = Field(default=48, gt=0)
    steps: int = Field(default=40, gt=1)
    dt_us: int = Field(default=1000, gt=0)


class GenEventsResponse(BaseModel):
    width: int
    height: int
    count: int
    events_text: str


class _ModelInput(BaseModel):
    model_b64: str | None = None
    model_path: str | None = None


class _StreamInput(_ModelInput):
    events_text: str | None = None
    events_path: str | None = None


class RunRequest(_StreamInput):
    mode: str = "async"
    representation: str | None = None
    window: int | None = Field(default=None, gt=0)
    batch: int = Field(default=1, ge=0)


class LedgerRowModel(BaseModel):
    layer: int
    op: str
    mode: str
    h_out: int
    w_out: int
    c_in: int
    c_out: int
    kernel: int
    n_r: int
    n_a: int
    counted_flops: int
    analytic_flops: int


class RunReport(BaseModel):
    mode: str
    representation: str
    window: int
    batch: int
    events_total: int
    events_primed: int
    updates: int
    total_flops: int
    flops_per_update: float
    rows: list[LedgerRowModel]
    output: list[float]
    csv: str


class CompareRequest(_StreamInput):
    representation: str | None = None
    window: int | None = Field(default=None, gt=0)
    batch: int = Field(default=1, ge=0)


class ModeSummary(BaseModel):
    mode: str
    updates: int
    total_flops: int
    flops_per_update: float
    rows: list[LedgerRowModel]
    output: list[float]


class CompareReport(BaseModel):
    representation: str
    window: int
    batch: int
    events_total: int
    events_primed: int
    updates: int
    max_abs_deviation: float
    max_rel_deviation: float
    step_abs_deviation: list[float]
    step_rel_deviation: list[float]
    dense: ModeSummary
    sparse: ModeSummary
    async_: ModeSummary = Field(alias="async")
    csv: str

    model_config = {"populate_by_name": True}


class FlopsRequest(_StreamInput):
    mode: str = "dense"
    representation: str | None = None
    window: int | None = Field(default=None, gt=0)
    batch: int = Field(default=1, ge=0)


class FlopsReport(BaseModel):
    mode: str
    updates: int
    total_flops: int
    rows: list[LedgerRowModel]
    csv: str


class FractalRequest(BaseModel):
    events_text: str | None = None
    events_path: str | None = None
    representation: str = "histogram"
    window: int = Field(default=25_000, gt=0)
    radii: list[int] | None = None
    center: tuple[int, int] | None = None


class FractalReport(BaseModel):
    center: tuple[int, int]
    radii: list[int]
    patch_sides: list[int]
    counts: list[int]
    slope: float
    residual: float
    csv: str


class RandomModelRequest(BaseModel):
    seed: int | None = None
    template: str = "vgg13"
    width: int | None = Field(default=None, gt=0)
    height: int | None = Field(default=None, gt=0)
    blocks: int = Field(default=2, gt=0)
    base_channels: int = Field(default=4, gt=0)
    representation: str = "histogram"
    fc_out: int = Field(default=10, gt=0)
    window: int = Field(default=25_000, gt=0)


class RandomModelResponse(BaseModel):
    name: str
    seed: int
    layers: int
    model_b64: str


class SessionCreateRequest(_ModelInput):
    representation: str | None = None
    window: int | None = Field(default=None, gt=0)
    dtype: str = "float32"
    events_text: str | None = None


class SessionInfo(BaseModel):
    session_id: str
    model_name: str
    representation: str
    window: int
    buffer_fill: int
    events_seen: int
    updates: int
    async_flops: int
    output: list[float]


class SessionPushRequest(BaseModel):
    events: list[tuple[int, int, int, int]] | None = None
    events_text: str | None = None
    batch: int = Field(default=1, ge=0)


class SessionPushResponse(BaseModel):
    session_id: str
    events_pushed: int
    updates: int
    async_flops: int
    buffer_fill: int
    output: list[float]
