"""Command line interface: a thin client over the pipeline operations.

Every subcommand takes --config (YAML or JSON run configuration) plus
--seed, --engine, --threads, and --out overrides; flags win over file
values. Outputs are CSV and JSON files under the output directory.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .errors import AnovaGPError

logger = logging.getLogger(__name__)

_THREAD_LIMITER = None  # keeps the BLAS thread cap alive for the process


def _apply_threads(threads):
    global _THREAD_LIMITER
    if not threads:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMITER = threadpool_limits(limits=int(threads))
    except ImportError:
        logger.warning("threadpoolctl not installed; thread cap applies to "
                       "subprocesses only")


def _load(config_path, seed, engine, threads, out_dir):
    from .config import load_config

    cfg = load_config(config_path, overrides={
        "seed": seed, "engine": engine, "threads": threads, "out_dir": out_dir,
    })
    _apply_threads(cfg.threads)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def common_options(f):
    for opt in reversed([
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="Run configuration file (YAML or JSON)."),
        click.option("--seed", type=int, default=None, help="Override the config seed."),
        click.option("--engine", type=click.Choice(["structured", "dense"]), default=None,
                     help="Override the evaluation engine."),
        click.option("--threads", type=int, default=None,
                     help="Cap BLAS/OpenMP threads for this run."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                     help="Override the output directory."),
    ]):
        f = opt(f)
    return f


def _dataset(cfg, dataset_path, need_complete: bool):
    from . import pipeline
    from .griddata import GridDataset

    if dataset_path:
        ds = GridDataset.load(dataset_path)
    else:
        ds = pipeline.run_ingest(cfg)
        if need_complete:
            ds = pipeline.run_impute(ds, cfg)
    if need_complete:
        pipeline.ensure_complete(ds)
    return ds


def _write_csv(rows, path):
    import pandas as pd

    pd.DataFrame(rows).to_csv(path, index=False)
    click.echo(f"wrote {path}")


@click.group()
@click.version_option(package_name="anovagp")
def main():
    """Additive Gaussian-process regression on grid data."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
def ingest(config_path, seed, engine, threads, out_dir):
    """Read the long-format input table into a complete grid dataset."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    ds = pipeline.run_ingest(cfg)
    path = Path(cfg.out_dir) / "dataset.npz"
    ds.save(path)
    missing = int(ds.missing_mask.sum())
    click.echo(
        f"grid {'x'.join(str(s) for s in ds.sizes)} (n = {ds.n}), "
        f"{missing} missing, dropped units: {ds.meta.get('dropped_units', [])}"
    )
    click.echo(f"wrote {path}")


@main.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Grid dataset (.npz) to impute; default: ingest first.")
def impute(config_path, seed, engine, threads, out_dir, dataset_path):
    """Fill missing slots with window-GP posterior predictive means."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    import numpy as np

    ds = _dataset(cfg, dataset_path, need_complete=False)
    before = int(np.isnan(ds.y).sum())
    out = pipeline.run_impute(ds, cfg)
    path = Path(cfg.out_dir) / "dataset_imputed.npz"
    out.save(path)
    click.echo(f"imputed {before} slots")
    click.echo(f"wrote {path}")


@main.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Complete grid dataset (.npz); default: ingest + impute.")
@click.option("--model", "model_name", default=None,
              help="Configured model to fit; default: the first one.")
def fit(config_path, seed, engine, threads, out_dir, dataset_path, model_name):
    """Fit one configured model and export it as JSON."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    ds = _dataset(cfg, dataset_path, need_complete=True)
    name = model_name or cfg.models[0].name
    fm = pipeline.fit_model(ds, cfg, name)
    path = Path(cfg.out_dir) / f"model_{name}.json"
    pipeline.save_model(fm, path)
    hp = fm.state.hp
    scales = ", ".join(f"alpha{l + 1} = {a:.4g}" for l, a in enumerate(hp.alpha))
    click.echo(
        f"{name}: logml = {fm.logml:.4f}, alpha0 = {hp.alpha0:.4g}, {scales}, "
        f"sigma = {hp.sigma:.4g} ({fm.report.iterations} iterations, "
        f"converged = {fm.report.converged})"
    )
    click.echo(f"wrote {path}")


@main.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Complete grid dataset (.npz); default: ingest + impute.")
def compare(config_path, seed, engine, threads, out_dir, dataset_path):
    """Fit every configured model and tabulate marginal likelihoods."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    ds = _dataset(cfg, dataset_path, need_complete=True)
    rows, fitted = pipeline.compare_models(ds, cfg)
    for name, fm in fitted.items():
        pipeline.save_model(fm, Path(cfg.out_dir) / f"model_{name}.json")
    _write_csv(rows, Path(cfg.out_dir) / "compare.csv")
    for row in rows:
        if row.get("error"):
            click.echo(f"{row['model']}: FAILED ({row['error']})")
        else:
            click.echo(
                f"{row['model']}: logml = {row['logml']:.4f}, "
                f"delta = {row['delta_logml']:.4f}"
            )


@main.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Complete grid dataset (.npz); default: ingest + impute.")
@click.option("--model", "model_name", default=None,
              help="Configured model to decompose; default: the first one.")
@click.option("--model-file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse a fitted model export instead of refitting.")
@click.option("--request", "requests", multiple=True,
              help="Effect request, e.g. '3' or '3+2:3@day=2020-03-01'. Repeatable; "
                   "defaults to the config's effects list.")
@click.option("--variance/--no-variance", default=None,
              help="Also export pointwise variances (defaults to the config).")
def effects(config_path, seed, engine, threads, out_dir, dataset_path, model_name,
            model_file, requests, variance):
    """Export per-effect posterior tables as CSV."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    ds = _dataset(cfg, dataset_path, need_complete=True)
    reqs = list(requests) or list(cfg.effects)
    if not reqs:
        raise click.UsageError("no effect requests: pass --request or set effects in the config")
    if model_file:
        fm = pipeline.load_model(model_file, ds.level_inputs, y=ds.y.ravel())
    else:
        fm = pipeline.fit_model(ds, cfg, model_name)
    include_variance = cfg.include_variance if variance is None else variance
    paths = pipeline.export_effects(fm, ds, reqs, cfg.out_dir,
                                    include_variance=include_variance)
    for p in paths:
        click.echo(f"wrote {p}")


@main.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Complete grid dataset (.npz); default: ingest + impute.")
@click.option("--model", "model_name", default=None,
              help="Configured model to predict with; default: the first one.")
@click.option("--model-file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reuse a fitted model export instead of refitting.")
def predict(config_path, seed, engine, threads, out_dir, dataset_path, model_name, model_file):
    """Posterior mean and variance on the training grid as CSV."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    ds = _dataset(cfg, dataset_path, need_complete=True)
    if model_file:
        fm = pipeline.load_model(model_file, ds.level_inputs, y=ds.y.ravel())
    else:
        fm = pipeline.fit_model(ds, cfg, model_name)
    frame = pipeline.predictions_frame(fm, ds)
    path = Path(cfg.out_dir) / "predictions.csv"
    frame.to_csv(path, index=False)
    click.echo(f"wrote {path}")


@main.command()
@common_options
def bench(config_path, seed, engine, threads, out_dir):
    """Time structured against dense evaluation on synthetic draws."""
    cfg = _load(config_path, seed, engine, threads, out_dir)
    from . import pipeline

    rows = pipeline.run_bench(cfg)
    _write_csv(rows, Path(cfg.out_dir) / "bench.csv")
    for row in rows:
        note = f" [{row['note']}]" if row["note"] else ""
        dense = (f"dense {row['dense_logml_s']:.4f}s, rel diff {row['rel_diff']:.2e}"
                 if row["dense_logml_s"] is not None else "dense skipped")
        click.echo(
            f"n = {row['n']:>8} ({row['sizes']}): eig {row['structured_eig_s']:.4f}s, "
            f"logml {row['structured_logml_s']:.4f}s, solve {row['structured_solve_s']:.4f}s; "
            f"{dense}{note}"
        )


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--threads", type=int, default=None, help="Cap BLAS/OpenMP threads.")
def serve(host, port, threads):
    """Run the HTTP service wrapping the same operations."""
    _apply_threads(threads)
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


def run():
    try:
        main(standalone_mode=True)
    except AnovaGPError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run()
