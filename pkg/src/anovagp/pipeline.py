"""Operations shared by the command line and the HTTP service: turning a
grid dataset into model states, fitting and comparing models, exporting
per-effect tables, and timing structured against dense evaluation.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import gp, griddata, kron, oracle
from .anova import (
    DENSE_LIMIT,
    HyperParams,
    TermCollection,
    format_term,
    model_presets,
    parse_term,
    saturated,
    tensor_only,
)
from .config import RunConfig
from .errors import AnovaGPError, ConfigError, DataError, UnknownTermError
from .gp import FittedModel, ModelState, Workspace
from .griddata import GridDataset
from .kernels import KernelSpec

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def run_ingest(cfg: RunConfig) -> GridDataset:
    if not cfg.input:
        raise ConfigError("config has no input path")
    return griddata.ingest(
        cfg.input,
        cfg.dimension_maps(),
        cfg.value,
        drop_threshold=cfg.ingest.drop_threshold,
        max_missing_run=cfg.ingest.max_missing_run,
        drop_units=cfg.ingest.drop_units,
        dst_transition=cfg.ingest.dst_transition,
    )


def run_impute(ds: GridDataset, cfg: RunConfig) -> GridDataset:
    if not np.isnan(ds.y).any():
        return ds
    return griddata.impute(ds, half_window=cfg.impute.half_window,
                           fit_config=cfg.fit_config())


def ensure_complete(ds: GridDataset) -> None:
    bad = int(np.isnan(ds.y).sum())
    if bad:
        raise DataError(f"dataset has {bad} unfilled slots; impute first")


def dataset_to_modelstate(ds: GridDataset, specs, terms: TermCollection) -> ModelState:
    """Model state on the dataset's grid; the response is ds.y.ravel()."""
    if len(specs) != ds.d or terms.d != ds.d:
        raise ConfigError(
            f"dataset has {ds.d} dimensions, got {len(specs)} kernels and terms over {terms.d}"
        )
    return ModelState(inputs=ds.level_inputs, specs=tuple(specs), terms=terms,
                      hp=HyperParams.unit(ds.d))


# ---------------------------------------------------------------------------
# fitting and comparison
# ---------------------------------------------------------------------------

def fit_model(ds: GridDataset, cfg: RunConfig, name: str | None = None) -> FittedModel:
    ensure_complete(ds)
    terms_by_name = cfg.model_terms()
    if name is None:
        name = cfg.models[0].name
    if name not in terms_by_name:
        raise ConfigError(f"unknown model {name!r}; configured: {list(terms_by_name)}")
    ms = dataset_to_modelstate(ds, cfg.specs(), terms_by_name[name])
    return gp.fit(ms, ds.y.ravel(), cfg.fit_config())


def compare_fits(ds: GridDataset, specs, model_settings, fit_cfg):
    """Fit a list of model settings on the dataset.

    Returns (rows, fitted) where rows is one dict per model in list
    order with the fitted scales, logml, and the difference to the first
    model's logml; per-model failures are recorded in the row and the
    run continues. fitted maps model name to its FittedModel.
    """
    ensure_complete(ds)
    y = ds.y.ravel()
    fitted: dict[str, FittedModel] = {}
    rows = []
    for m in model_settings:
        row = {"model": m.name, "terms": " ".join(m.terms)}
        try:
            ms = dataset_to_modelstate(ds, specs, m.to_terms(ds.d))
            fm = gp.fit(ms, y, fit_cfg)
            hp = fm.state.hp
            row["alpha0"] = hp.alpha0
            for l in range(1, ds.d + 1):
                row[f"alpha{l}"] = hp.alpha[l - 1]
            row["sigma"] = hp.sigma
            row["logml"] = fm.logml
            row["converged"] = fm.report.converged
            row["wall_time_s"] = fm.report.wall_time
            row["error"] = None
            fitted[m.name] = fm
        except AnovaGPError as exc:
            logger.warning("model %s failed: %s", m.name, exc)
            row["error"] = str(exc)
        rows.append(row)
    base = rows[0].get("logml")
    for row in rows:
        lm = row.get("logml")
        row["delta_logml"] = (lm - base) if (lm is not None and base is not None) else None
    return rows, fitted


def compare_models(ds: GridDataset, cfg: RunConfig):
    """Fit every configured model on the dataset, see compare_fits."""
    return compare_fits(ds, cfg.specs(), cfg.models, cfg.fit_config())


# ---------------------------------------------------------------------------
# per-effect export
# ---------------------------------------------------------------------------

def _dim_number(ds: GridDataset, token: str) -> int:
    token = token.strip()
    if token in ds.dim_names:
        return ds.dim_names.index(token) + 1
    try:
        l = int(token)
    except ValueError:
        raise ConfigError(f"unknown dimension {token!r}; names: {list(ds.dim_names)}")
    if not 1 <= l <= ds.d:
        raise ConfigError(f"dimension number {l} outside 1..{ds.d}")
    return l


def parse_effect_request(request: str, ds: GridDataset):
    """Parse 'term(+term...)[@dim=level(,dim=level...)]' against a dataset.

    Terms use the colon notation of the model configuration ('0' is the
    constant). Slice dimensions are named or numbered; levels are label
    strings. Returns (terms, slices) with slices mapping dimension number
    to level index.
    """
    request = request.strip()
    if not request:
        raise ConfigError("empty effect request")
    head, _, tail = request.partition("@")
    terms = [parse_term(part) for part in head.split("+")]
    for t in terms:
        if t and t[-1] > ds.d:
            raise ConfigError(f"term {format_term(t)} exceeds dimension count d={ds.d}")
    seen = set()
    for t in terms:
        if t in seen:
            raise ConfigError(f"term {format_term(t)} repeated in request {request!r}")
        seen.add(t)
    slices: dict[int, int] = {}
    if tail:
        for piece in tail.split(","):
            dim_s, eq, label = piece.partition("=")
            if not eq:
                raise ConfigError(f"bad slice {piece!r}, expected dim=level")
            l = _dim_number(ds, dim_s)
            label = label.strip()
            labels = ds.level_labels[l - 1]
            if label not in labels:
                raise ConfigError(
                    f"level {label!r} not found in dimension {ds.dim_names[l - 1]!r}"
                )
            if l in slices:
                raise ConfigError(f"dimension {ds.dim_names[l - 1]!r} sliced twice")
            slices[l] = labels.index(label)
    involved = {l for t in terms for l in t}
    stray = set(slices) - involved
    if stray:
        names = [ds.dim_names[l - 1] for l in sorted(stray)]
        raise ConfigError(f"sliced dimensions {names} do not appear in the requested terms")
    return terms, slices


def _request_slug(request: str) -> str:
    out = []
    for ch in request.strip():
        if ch.isalnum():
            out.append(ch)
        elif ch == ":":
            out.append("x")
        elif ch == "+":
            out.append("_plus_")
        elif ch == "@":
            out.append("_at_")
        elif ch in "=,":
            out.append("-")
        elif ch in "._-":
            out.append(ch)
    return "".join(out) or "effect"


def evaluate_effect(fm: FittedModel, ds: GridDataset, request: str,
                    include_variance: bool = False) -> pd.DataFrame:
    """Long-format table for one effect request: one row per combination
    of the free dimensions' training levels, with the posterior mean of
    the requested term sum (and its pointwise variance on request).
    Sliced dimensions appear as constant label columns.
    """
    terms, slices = parse_effect_request(request, ds)
    for t in terms:
        if t and t not in fm.state.terms:
            raise UnknownTermError(f"term {format_term(t)} not in the fitted model")
    involved = sorted({l for t in terms for l in t})
    free = [l for l in involved if l not in slices]
    shape = tuple(ds.sizes[l - 1] for l in free)

    total = np.zeros(shape if shape else (1,))
    for t in terms:
        if not t:
            total += float(gp.term_posterior_mean(fm, ()))
            continue
        pts = []
        for l in t:
            inp = ds.level_inputs[l - 1]
            pts.append(inp if l in free else inp[slices[l] : slices[l] + 1])
        sub = gp.term_posterior_mean(fm, t, pts)
        sub = sub.reshape([ds.sizes[l - 1] if l in free else 1 for l in t])
        sub = np.squeeze(sub, axis=tuple(i for i, l in enumerate(t) if l not in free))
        expand = [ds.sizes[l - 1] if l in t else 1 for l in free]
        total = total + sub.reshape(expand if expand else (1,))

    columns: dict[str, object] = {}
    if free:
        grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
        for i, l in enumerate(free):
            _attach_dim_columns(columns, ds, l, grids[i].ravel())
    for l in sorted(slices):
        _attach_dim_columns(columns, ds, l, np.full(total.size, slices[l]))
    columns["mean"] = total.ravel()

    if include_variance:
        pts_by_dim = {}
        for l in involved:
            inp = ds.level_inputs[l - 1]
            pts_by_dim[l] = inp if l in free else inp[slices[l] : slices[l] + 1]
        var = gp.combined_posterior_variance(fm, terms, pts_by_dim)
        if involved:
            keep = tuple(i for i, l in enumerate(involved) if l in free)
            drop = tuple(i for i, l in enumerate(involved) if l not in free)
            var = np.squeeze(var, axis=drop) if drop else var
        columns["variance"] = np.broadcast_to(var, shape).ravel() if shape else np.atleast_1d(var)

    return pd.DataFrame(columns)


def _attach_dim_columns(columns: dict, ds: GridDataset, l: int, level_idx: np.ndarray) -> None:
    name = ds.dim_names[l - 1]
    labels = np.array(ds.level_labels[l - 1], dtype=object)
    columns[name] = labels[level_idx]
    inp = ds.level_inputs[l - 1]
    if inp.ndim == 1:
        columns[f"{name}_input"] = inp[level_idx]
    else:
        for j in range(inp.shape[1]):
            columns[f"{name}_input_{j + 1}"] = inp[level_idx, j]


def export_effects(fm: FittedModel, ds: GridDataset, requests, out_dir,
                   include_variance: bool = False) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for request in requests:
        frame = evaluate_effect(fm, ds, request, include_variance=include_variance)
        path = out_dir / f"effect_{_request_slug(request)}.csv"
        frame.to_csv(path, index=False)
        paths.append(path)
    return paths


def predictions_frame(fm: FittedModel, ds: GridDataset) -> pd.DataFrame:
    """Posterior mean and variance on the training grid as a long table."""
    means, variances = gp.predict(fm)
    grids = np.meshgrid(*[np.arange(s) for s in ds.sizes], indexing="ij")
    columns: dict[str, object] = {}
    for l in range(1, ds.d + 1):
        _attach_dim_columns(columns, ds, l, grids[l - 1].ravel())
    columns["observed"] = ds.y.ravel()
    columns["mean"] = means.ravel()
    columns["variance"] = variances.ravel()
    return pd.DataFrame(columns)


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(fm: FittedModel, path, include_weights: bool = True) -> None:
    doc = gp.export_model(fm, include_weights=include_weights)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path, inputs, y=None) -> FittedModel:
    doc = json.loads(Path(path).read_text())
    return gp.model_from_export(doc, inputs, y=y)


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------

def _bench_terms(name: str, d: int, cfg: RunConfig | None = None) -> TermCollection:
    name = name or "saturated"
    presets = model_presets()
    if d == 3 and name in presets:
        return presets[name]
    if name == "saturated":
        return saturated(d)
    if name == "tensor":
        return tensor_only(d)
    if name == "main":
        terms = [()] + [(l,) for l in range(1, d + 1)]
        return TermCollection(d, tuple(terms))
    if cfg is not None:
        for m in cfg.models:
            if m.name == name and cfg.d == d:
                return m.to_terms(d)
    raise ConfigError(f"unknown bench model {name!r} for {d} dimensions")


def run_bench(cfg: RunConfig, seed: int | None = None) -> list:
    """Synthetic timing of structured against dense marginal evaluation.

    One row per size entry: eigendecomposition, logml, and solve times
    for the structured path; the dense arm runs only under the size
    guard and otherwise carries a note. Numerical outputs (logml values,
    agreement) are deterministic for a fixed seed.
    """
    seed = cfg.seed if seed is None else seed
    rows = []
    for k, sizes in enumerate(cfg.bench.sizes):
        sizes = tuple(int(s) for s in sizes)
        d = len(sizes)
        rng = np.random.default_rng(seed + 7 * k)
        inputs = tuple(np.sort(rng.uniform(0.0, 3.0, size=s)) for s in sizes)
        specs = tuple(
            KernelSpec("fbm", gamma=0.5, centred=True, squared=True) for _ in sizes
        )
        terms = _bench_terms(cfg.bench.model, d, cfg)
        hp = HyperParams(alpha0=1.0, alpha=(1.0,) * d, sigma=cfg.bench.noise)
        ms = ModelState(inputs=inputs, specs=specs, terms=terms, hp=hp)
        f = gp.sample_prior(ms, seed=seed + 13 * k)
        y = f + cfg.bench.noise * rng.standard_normal(ms.n)

        t0 = time.perf_counter()
        ws = Workspace(ms)
        t_eig = time.perf_counter() - t0
        t0 = time.perf_counter()
        logml = gp.log_marginal_likelihood(ms, y, workspace=ws)
        t_logml = time.perf_counter() - t0
        t0 = time.perf_counter()
        diag = ws.diagonal(ms.hp)
        w = kron.solve_marginal(ws.bases, diag, ms.hp.sigma ** 2, y)
        t_solve = time.perf_counter() - t0
        resid = float(np.linalg.norm(kron.mult_marginal(ws.bases, diag, ms.hp.sigma ** 2, w) - y))

        row = {
            "sizes": "x".join(str(s) for s in sizes),
            "n": ms.n,
            "structured_eig_s": t_eig,
            "structured_logml_s": t_logml,
            "structured_solve_s": t_solve,
            "structured_logml": logml,
            "solve_residual": resid,
            "dense_logml_s": None,
            "rel_diff": None,
            "note": "",
        }
        if ms.n <= DENSE_LIMIT:
            t0 = time.perf_counter()
            dense_val = oracle.dense_logml(ms, y)
            row["dense_logml_s"] = time.perf_counter() - t0
            row["rel_diff"] = abs(dense_val - logml) / max(abs(dense_val), 1e-30)
        else:
            row["note"] = f"dense arm skipped (n = {ms.n} over the {DENSE_LIMIT} guard)"
        rows.append(row)
    return rows
