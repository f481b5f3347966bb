"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..config import DimensionSettings, KernelSettings, ModelSettings, OptimizerSettings


class IngestRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    csv_text: str
    dimensions: list[DimensionSettings] = Field(min_length=1)
    value: str = "value"
    drop_threshold: float = 0.30
    max_missing_run: int = 48
    drop_units: bool = True
    dst_transition: Optional[str] = None


class DatasetSummary(BaseModel):
    name: str
    dim_names: list[str]
    sizes: list[int]
    n: int
    missing: int
    dropped_units: list[str]


class FitRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    dataset: str
    terms: list[str] = Field(min_length=1)
    kernels: Optional[list[KernelSettings]] = None
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    engine: Literal["structured", "dense"] = "structured"


class HyperParamsOut(BaseModel):
    alpha0: float
    alpha: list[float]
    sigma: float


class FitSummary(BaseModel):
    name: str
    dataset: str
    terms: list[str]
    logml: float
    hyperparams: HyperParamsOut
    iterations: int
    converged: bool
    wall_time_s: float


class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    query: Optional[dict[int, list[Any]]] = None
    include_noise: bool = False


class PredictResponse(BaseModel):
    shape: list[int]
    mean: list[float]
    variance: list[float]


class EffectRequestBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    request: str
    include_variance: bool = False


class EffectResponse(BaseModel):
    request: str
    columns: list[str]
    rows: list[dict[str, Any]]


class CompareRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str
    models: list[ModelSettings] = Field(min_length=1)
    kernels: Optional[list[KernelSettings]] = None
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    engine: Literal["structured", "dense"] = "structured"


class CompareResponse(BaseModel):
    rows: list[dict[str, Any]]


class SampleRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0


class SampleResponse(BaseModel):
    shape: list[int]
    values: list[float]
