"""Run configuration: a single structured file (YAML or JSON) describing
ingestion columns, per-dimension kernels, the model list, optimizer
settings, and output locations. Command-line flags override file values.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .anova import TermCollection
from .errors import ConfigError
from .gp import FitConfig
from .griddata import (
    DEFAULT_MISSING_FRACTION,
    DEFAULT_MISSING_RUN,
    DimensionMap,
    IMPUTE_HALF_WINDOW,
)
from .kernels import KernelSpec


class KernelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: str = "fbm"
    gamma: Optional[float] = 0.5
    rho: Optional[float] = None
    nu: Optional[float] = None
    period: Optional[float] = None
    degree: Optional[int] = None
    offset: Optional[float] = None
    centred: bool = True
    squared: bool = True

    def to_spec(self) -> KernelSpec:
        kwargs = {
            k: v
            for k, v in {
                "gamma": self.gamma,
                "rho": self.rho,
                "nu": self.nu,
                "period": self.period,
                "degree": self.degree,
                "offset": self.offset,
            }.items()
            if v is not None
        }
        return KernelSpec(self.family, centred=self.centred, squared=self.squared, **kwargs)


class DimensionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    key: str = ""
    coords: list[str] = Field(default_factory=list)
    inputs: Literal["auto", "value", "date", "rank", "coords"] = "auto"
    offset: float = 0.0
    scale: float = 1.0
    kernel: KernelSettings = Field(default_factory=KernelSettings)

    def to_map(self) -> DimensionMap:
        return DimensionMap(
            name=self.name,
            key=self.key or self.name,
            coords=tuple(self.coords),
            inputs=self.inputs,
            offset=self.offset,
            scale=self.scale,
        )


class ModelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    terms: list[str] = Field(min_length=1)
    mode: Literal["hierarchical", "tensor_only"] = "hierarchical"

    def to_terms(self, d: int) -> TermCollection:
        return TermCollection.from_strings(d, self.terms, mode=self.mode)


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iter: int = 500
    tol: float = 1e-8
    fd_step: float = 1e-5
    bound_span: float = 15.0
    init: dict[str, float] = Field(default_factory=dict)

    def to_fit_config(self, engine: str = "structured") -> FitConfig:
        return FitConfig(
            max_iter=self.max_iter,
            tol=self.tol,
            fd_step=self.fd_step,
            bound_span=self.bound_span,
            engine=engine,
            init=dict(self.init),
        )


class IngestSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drop_threshold: float = DEFAULT_MISSING_FRACTION
    max_missing_run: int = DEFAULT_MISSING_RUN
    drop_units: bool = True
    dst_transition: Optional[str] = None


class ImputeSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    half_window: int = IMPUTE_HALF_WINDOW


class BenchSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sizes: list[list[int]] = Field(default_factory=lambda: [[4, 5, 3], [6, 7, 5]])
    model: str = ""  # defaults to the first configured model
    noise: float = 0.5


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input: Optional[str] = None
    value: str = "value"
    dimensions: list[DimensionSettings] = Field(min_length=1)
    models: list[ModelSettings] = Field(min_length=1)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    ingest: IngestSettings = Field(default_factory=IngestSettings)
    impute: ImputeSettings = Field(default_factory=ImputeSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)
    effects: list[str] = Field(default_factory=list)
    engine: Literal["structured", "dense"] = "structured"
    seed: int = 0
    threads: Optional[int] = None
    out_dir: str = "out"
    include_variance: bool = False

    @field_validator("models")
    @classmethod
    def _unique_model_names(cls, models):
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate model names: {names}")
        return models

    @property
    def d(self) -> int:
        return len(self.dimensions)

    def specs(self) -> tuple:
        return tuple(dim.kernel.to_spec() for dim in self.dimensions)

    def dimension_maps(self) -> list:
        return [dim.to_map() for dim in self.dimensions]

    def model_terms(self) -> dict:
        return {m.name: m.to_terms(self.d) for m in self.models}

    def fit_config(self) -> FitConfig:
        return self.optimizer.to_fit_config(self.engine)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a YAML or JSON config file, apply flag overrides, validate."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    try:
        return RunConfig(**raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
