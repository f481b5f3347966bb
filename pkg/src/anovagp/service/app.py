"""HTTP front end over the core package.

Datasets and fitted models live in two in-memory registries on the
application instance; the process serves one collection of each. All
domain failures surface as 422 responses carrying the error message,
missing names as 404, and name collisions as 409.
"""

from __future__ import annotations

import io
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__, gp, griddata, pipeline
from ..config import KernelSettings
from ..errors import AnovaGPError, ConfigError
from ..gp import FittedModel
from ..griddata import GridDataset
from .schemas import (
    CompareRequest,
    CompareResponse,
    DatasetSummary,
    EffectRequestBody,
    EffectResponse,
    FitRequest,
    FitSummary,
    HyperParamsOut,
    IngestRequest,
    PredictRequest,
    PredictResponse,
    SampleRequest,
    SampleResponse,
)


def _summary(name: str, ds: GridDataset) -> DatasetSummary:
    return DatasetSummary(
        name=name,
        dim_names=list(ds.dim_names),
        sizes=list(ds.sizes),
        n=ds.n,
        missing=int(np.isnan(ds.y).sum()),
        dropped_units=list(ds.meta.get("dropped_units", [])),
    )


def _fit_summary(name: str, entry: dict) -> FitSummary:
    fm: FittedModel = entry["fm"]
    hp = fm.state.hp
    return FitSummary(
        name=name,
        dataset=entry["dataset"],
        terms=fm.state.terms.term_strings(),
        logml=fm.logml,
        hyperparams=HyperParamsOut(alpha0=hp.alpha0, alpha=list(hp.alpha), sigma=hp.sigma),
        iterations=fm.report.iterations,
        converged=fm.report.converged,
        wall_time_s=fm.report.wall_time,
    )


def _specs_for(ds: GridDataset, kernels: Optional[list[KernelSettings]]):
    if kernels is None:
        kernels = [KernelSettings() for _ in range(ds.d)]
    if len(kernels) != ds.d:
        raise ConfigError(f"dataset has {ds.d} dimensions, got {len(kernels)} kernels")
    return tuple(k.to_spec() for k in kernels)


def create_app() -> FastAPI:
    app = FastAPI(title="anovagp", version=__version__)
    datasets: dict[str, GridDataset] = {}
    models: dict[str, dict] = {}
    app.state.datasets = datasets
    app.state.models = models

    @app.exception_handler(AnovaGPError)
    async def _domain_error(request: Request, exc: AnovaGPError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    def _dataset(name: str) -> GridDataset:
        if name not in datasets:
            raise HTTPException(status_code=404, detail=f"no dataset named {name!r}")
        return datasets[name]

    def _model(name: str) -> dict:
        if name not in models:
            raise HTTPException(status_code=404, detail=f"no model named {name!r}")
        return models[name]

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    # -- datasets ---------------------------------------------------------

    @app.get("/datasets", response_model=list[DatasetSummary])
    def list_datasets():
        return [_summary(name, ds) for name, ds in sorted(datasets.items())]

    @app.post("/datasets", response_model=DatasetSummary, status_code=201)
    def create_dataset(req: IngestRequest):
        if req.name in datasets:
            raise HTTPException(status_code=409, detail=f"dataset {req.name!r} already exists")
        ds = griddata.ingest(
            io.StringIO(req.csv_text),
            [dim.to_map() for dim in req.dimensions],
            req.value,
            drop_threshold=req.drop_threshold,
            max_missing_run=req.max_missing_run,
            drop_units=req.drop_units,
            dst_transition=req.dst_transition,
        )
        datasets[req.name] = ds
        return _summary(req.name, ds)

    @app.get("/datasets/{name}", response_model=DatasetSummary)
    def get_dataset(name: str):
        return _summary(name, _dataset(name))

    @app.post("/datasets/{name}/impute", response_model=DatasetSummary)
    def impute_dataset(name: str):
        ds = _dataset(name)
        if np.isnan(ds.y).any():
            ds = griddata.impute(ds)
            datasets[name] = ds
        return _summary(name, ds)

    # -- models -----------------------------------------------------------

    @app.get("/models", response_model=list[FitSummary])
    def list_models():
        return [_fit_summary(name, entry) for name, entry in sorted(models.items())]

    @app.post("/models", response_model=FitSummary, status_code=201)
    def fit_model(req: FitRequest):
        if req.name in models:
            raise HTTPException(status_code=409, detail=f"model {req.name!r} already exists")
        ds = _dataset(req.dataset)
        pipeline.ensure_complete(ds)
        specs = _specs_for(ds, req.kernels)
        terms = pipeline.TermCollection.from_strings(ds.d, req.terms)
        ms = pipeline.dataset_to_modelstate(ds, specs, terms)
        fm = gp.fit(ms, ds.y.ravel(), req.optimizer.to_fit_config(req.engine))
        models[req.name] = {"fm": fm, "dataset": req.dataset}
        return _fit_summary(req.name, models[req.name])

    @app.get("/models/{name}", response_model=FitSummary)
    def get_model(name: str):
        return _fit_summary(name, _model(name))

    @app.get("/models/{name}/export")
    def export_model(name: str, weights: bool = False):
        return gp.export_model(_model(name)["fm"], include_weights=weights)

    @app.post("/models/{name}/predict", response_model=PredictResponse)
    def predict(name: str, req: PredictRequest):
        fm = _model(name)["fm"]
        query = None
        if req.query is not None:
            query = {l: np.asarray(v, dtype=float) for l, v in req.query.items()}
        mean, var = gp.predict(fm, query, include_noise=req.include_noise)
        return PredictResponse(
            shape=list(np.shape(mean)),
            mean=np.ravel(mean).tolist(),
            variance=np.ravel(var).tolist(),
        )

    @app.post("/models/{name}/effects", response_model=EffectResponse)
    def effects(name: str, req: EffectRequestBody):
        entry = _model(name)
        ds = _dataset(entry["dataset"])
        frame = pipeline.evaluate_effect(entry["fm"], ds, req.request,
                                         include_variance=req.include_variance)
        return EffectResponse(
            request=req.request,
            columns=list(frame.columns),
            rows=frame.to_dict("records"),
        )

    @app.post("/models/{name}/sample", response_model=SampleResponse)
    def sample(name: str, req: SampleRequest):
        fm = _model(name)["fm"]
        draw = gp.sample_prior(fm.state, seed=req.seed)
        return SampleResponse(shape=list(fm.state.sizes), values=draw.tolist())

    # -- comparison -------------------------------------------------------

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest):
        ds = _dataset(req.dataset)
        names = [m.name for m in req.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names: {names}")
        specs = _specs_for(ds, req.kernels)
        rows, _ = pipeline.compare_fits(ds, specs, req.models,
                                        req.optimizer.to_fit_config(req.engine))
        return CompareResponse(rows=rows)

    return app
