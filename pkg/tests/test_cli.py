"""Command line round trips: every subcommand against a small panel,
flag overrides, model reuse through exports, and the error exit path.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from anovagp import cli

STATIONS = [("s1", 1.0, 2.0), ("s2", 4.0, 0.5)]
DAYS = ["2016-03-01", "2016-03-02", "2016-03-03"]
HOURS = ["0", "1", "2", "3"]


def panel_frame(missing=(), seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for site, east, north in STATIONS:
        for di, date in enumerate(DAYS):
            for hi, hour in enumerate(HOURS):
                val = 10.0 + 2.0 * di + np.sin(hi) + rng.normal(0.0, 0.3)
                rows.append({
                    "site": site, "east": east, "north": north,
                    "date": date, "hour": hour,
                    "no2": "" if (site, date, hour) in missing else f"{val:.6f}",
                })
    return pd.DataFrame(rows)


def write_inputs(tmp_path, missing=(), extra=None):
    tmp_path.mkdir(parents=True, exist_ok=True)
    csv = tmp_path / "panel.csv"
    panel_frame(missing).to_csv(csv, index=False)
    doc = {
        "input": str(csv),
        "value": "no2",
        "dimensions": [
            {"name": "station", "key": "site", "coords": ["east", "north"],
             "kernel": {"family": "fbm", "gamma": 0.3}},
            {"name": "day", "key": "date"},
            {"name": "hour", "key": "hour"},
        ],
        "models": [
            {"name": "main", "terms": ["0", "1", "2", "3"]},
            {"name": "pair", "terms": ["0", "1", "2", "3", "2:3"]},
        ],
        "optimizer": {"max_iter": 60},
        "seed": 0,
        "out_dir": str(tmp_path / "out"),
    }
    doc.update(extra or {})
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def invoke(*args):
    runner = CliRunner()
    result = runner.invoke(cli.main, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result


class TestIngestImpute:
    def test_ingest_writes_dataset(self, tmp_path):
        path = write_inputs(tmp_path)
        result = invoke("ingest", "--config", path)
        assert "grid 2x3x4 (n = 24)" in result.output
        assert (tmp_path / "out" / "dataset.npz").exists()

    def test_impute_completes_dataset(self, tmp_path):
        from anovagp.griddata import GridDataset

        path = write_inputs(tmp_path, missing={("s1", "2016-03-02", "1")})
        result = invoke("impute", "--config", path)
        assert "imputed 1 slots" in result.output
        ds = GridDataset.load(tmp_path / "out" / "dataset_imputed.npz")
        assert not np.isnan(ds.y).any()
        assert ds.missing_mask.sum() == 1  # provenance kept

    def test_out_flag_overrides_config(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("ingest", "--config", path, "--out", tmp_path / "elsewhere")
        assert (tmp_path / "elsewhere" / "dataset.npz").exists()


class TestFit:
    def test_fit_default_model(self, tmp_path):
        path = write_inputs(tmp_path)
        result = invoke("fit", "--config", path)
        assert "main: logml = " in result.output
        doc = json.loads((tmp_path / "out" / "model_main.json").read_text())
        assert doc["terms"] == ["0", "1", "2", "3"]

    def test_fit_named_model_from_saved_dataset(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("ingest", "--config", path)
        invoke("fit", "--config", path, "--dataset", tmp_path / "out" / "dataset.npz",
               "--model", "pair")
        doc = json.loads((tmp_path / "out" / "model_pair.json").read_text())
        assert "2:3" in doc["terms"]

    def test_fit_deterministic_across_paths(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("ingest", "--config", path)
        invoke("fit", "--config", path)
        direct = json.loads((tmp_path / "out" / "model_main.json").read_text())
        invoke("fit", "--config", path, "--dataset", tmp_path / "out" / "dataset.npz",
               "--out", tmp_path / "out2")
        reused = json.loads((tmp_path / "out2" / "model_main.json").read_text())
        assert direct["logml"] == reused["logml"]
        assert direct["hyperparams"] == reused["hyperparams"]

    def test_engine_override_agrees(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("fit", "--config", path)
        invoke("fit", "--config", path, "--engine", "dense", "--out", tmp_path / "dense")
        a = json.loads((tmp_path / "out" / "model_main.json").read_text())
        b = json.loads((tmp_path / "dense" / "model_main.json").read_text())
        np.testing.assert_allclose(a["logml"], b["logml"], rtol=1e-6)


class TestCompare:
    def test_compare_table(self, tmp_path):
        path = write_inputs(tmp_path)
        result = invoke("compare", "--config", path)
        assert "main: logml = " in result.output and "pair: logml = " in result.output
        frame = pd.read_csv(tmp_path / "out" / "compare.csv")
        assert list(frame["model"]) == ["main", "pair"]
        assert frame["delta_logml"].iloc[0] == 0.0
        assert (tmp_path / "out" / "model_main.json").exists()
        assert (tmp_path / "out" / "model_pair.json").exists()

    def test_failed_model_reported(self, tmp_path):
        models = [{"name": "main", "terms": ["0", "1", "2", "3"]},
                  {"name": "broken", "terms": ["0", "4"]}]
        path = write_inputs(tmp_path, extra={"models": models})
        result = invoke("compare", "--config", path)
        assert "broken: FAILED" in result.output


class TestEffects:
    def test_requests_from_flags(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("effects", "--config", path, "--model", "pair",
               "--request", "3", "--request", "3+2:3@day=2016-03-02")
        frame = pd.read_csv(tmp_path / "out" / "effect_3.csv")
        assert list(frame.columns) == ["hour", "hour_input", "mean"]
        assert abs(frame["mean"].sum()) <= 1e-8 * 20.0
        sliced = pd.read_csv(tmp_path / "out" / "effect_3_plus_2x3_at_day-2016-03-02.csv")
        assert set(sliced["day"]) == {"2016-03-02"}

    def test_requests_from_config_with_variance(self, tmp_path):
        path = write_inputs(tmp_path, extra={"effects": ["2"], "include_variance": True})
        invoke("effects", "--config", path, "--model", "pair")
        frame = pd.read_csv(tmp_path / "out" / "effect_2.csv")
        assert "variance" in frame.columns
        assert (frame["variance"] >= 0).all()

    def test_model_file_reuse_matches_refit(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("fit", "--config", path, "--model", "pair")
        invoke("effects", "--config", path, "--model", "pair", "--request", "3")
        refit = (tmp_path / "out" / "effect_3.csv").read_text()
        invoke("effects", "--config", path, "--request", "3",
               "--model-file", tmp_path / "out" / "model_pair.json",
               "--out", tmp_path / "reuse")
        reused = (tmp_path / "reuse" / "effect_3.csv").read_text()
        assert refit == reused

    def test_no_requests_is_usage_error(self, tmp_path):
        path = write_inputs(tmp_path)
        runner = CliRunner()
        result = runner.invoke(cli.main, ["effects", "--config", str(path)])
        assert result.exit_code != 0
        assert "no effect requests" in result.output


class TestPredictBench:
    def test_predict_writes_long_table(self, tmp_path):
        path = write_inputs(tmp_path)
        invoke("predict", "--config", path)
        frame = pd.read_csv(tmp_path / "out" / "predictions.csv")
        assert len(frame) == 24
        assert {"observed", "mean", "variance"} <= set(frame.columns)
        # posterior mean tracks the data on a fitted saturated-free model
        assert np.corrcoef(frame["observed"], frame["mean"])[0, 1] > 0.5

    def test_bench_small_and_large(self, tmp_path):
        path = write_inputs(
            tmp_path, extra={"bench": {"sizes": [[3, 4, 3], [18, 18, 18]], "model": "main"}})
        result = invoke("bench", "--config", path)
        frame = pd.read_csv(tmp_path / "out" / "bench.csv")
        assert list(frame["n"]) == [36, 5832]
        assert frame["rel_diff"].iloc[0] < 1e-8
        assert "dense skipped" in result.output


class TestProcessLevel:
    def test_thread_cap_sets_environment(self):
        cli._apply_threads(2)
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert os.environ["OPENBLAS_NUM_THREADS"] == "2"

    def test_domain_error_exits_two(self, tmp_path):
        models = [{"name": "broken", "terms": ["0", "4"]}]
        path = write_inputs(tmp_path, extra={"models": models})
        proc = subprocess.run(
            [sys.executable, "-m", "anovagp.cli", "fit", "--config", str(path)],
            capture_output=True, text=True)
        assert proc.returncode == 2
        assert "error:" in proc.stderr
