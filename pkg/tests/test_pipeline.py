"""Config loading plus the shared pipeline layer: ingestion, fitting,
comparison tables, effect exports, persistence, and benchmarking.
"""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from anovagp import gp, pipeline
from anovagp.config import load_config
from anovagp.errors import ConfigError, DataError, UnknownTermError

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


class TestConfig:
    def test_yaml_load(self, tmp_path):
        cfg = load_config(write_inputs(tmp_path))
        assert cfg.d == 3
        assert cfg.value == "no2"
        specs = cfg.specs()
        assert specs[0].gamma == 0.3 and specs[1].gamma == 0.5
        assert all(s.centred and s.squared for s in specs)
        assert [m.name for m in cfg.models] == ["main", "pair"]
        assert cfg.optimizer.max_iter == 60
        assert cfg.engine == "structured"

    def test_json_load(self, tmp_path):
        raw = yaml.safe_load(write_inputs(tmp_path).read_text())
        path = tmp_path / "run.json"
        path.write_text(json.dumps(raw))
        cfg = load_config(path)
        assert cfg.d == 3

    def test_overrides_applied(self, tmp_path):
        path = write_inputs(tmp_path)
        cfg = load_config(path, {"seed": 7, "engine": "dense", "threads": None})
        assert cfg.seed == 7
        assert cfg.engine == "dense"
        assert cfg.threads is None  # None override leaves the default

    def test_unknown_key_rejected(self, tmp_path):
        path = write_inputs(tmp_path, extra={"bogus": 1})
        with pytest.raises(ConfigError, match="bogus"):
            load_config(path)

    def test_duplicate_model_names(self, tmp_path):
        models = [{"name": "main", "terms": ["0", "1"]},
                  {"name": "main", "terms": ["0", "2"]}]
        path = write_inputs(tmp_path, extra={"models": models})
        with pytest.raises(ConfigError, match="duplicate"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("- just\n- a\n- list\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_fit_config_carries_engine(self, tmp_path):
        cfg = load_config(write_inputs(tmp_path, extra={"engine": "dense"}))
        assert cfg.fit_config().engine == "dense"

    def test_tensor_only_model_mode(self, tmp_path):
        from anovagp.anova import tensor_only

        models = [{"name": "tensor", "terms": ["1:2:3"], "mode": "tensor_only"}]
        cfg = load_config(write_inputs(tmp_path, extra={"models": models}))
        assert cfg.model_terms()["tensor"] == tensor_only(3)


@pytest.fixture()
def setup(tmp_path):
    cfg = load_config(write_inputs(tmp_path))
    ds = pipeline.run_ingest(cfg)
    return cfg, ds


class TestDatasetPlumbing:
    def test_ingest_shape(self, setup):
        _, ds = setup
        assert ds.sizes == (2, 3, 4)
        assert not np.isnan(ds.y).any()

    def test_impute_is_noop_when_complete(self, setup):
        cfg, ds = setup
        assert pipeline.run_impute(ds, cfg) is ds

    def test_ensure_complete_reports_count(self, tmp_path):
        path = write_inputs(tmp_path, missing={("s1", "2016-03-02", "1")})
        cfg = load_config(path)
        ds = pipeline.run_ingest(cfg)
        with pytest.raises(DataError, match="1 unfilled"):
            pipeline.ensure_complete(ds)
        filled = pipeline.run_impute(ds, cfg)
        pipeline.ensure_complete(filled)

    def test_modelstate_dimension_mismatch(self, setup):
        cfg, ds = setup
        with pytest.raises(ConfigError, match="dimensions"):
            pipeline.dataset_to_modelstate(ds, cfg.specs()[:2], cfg.model_terms()["main"])

    def test_unknown_model_name(self, setup):
        cfg, ds = setup
        with pytest.raises(ConfigError, match="unknown model"):
            pipeline.fit_model(ds, cfg, "nope")


class TestFitCompare:
    def test_fit_matches_direct_call(self, setup):
        cfg, ds = setup
        fm = pipeline.fit_model(ds, cfg, "main")
        ms = pipeline.dataset_to_modelstate(ds, cfg.specs(), cfg.model_terms()["main"])
        ref = gp.fit(ms, ds.y.ravel(), cfg.fit_config())
        assert fm.logml == ref.logml
        assert fm.state.hp == ref.state.hp

    def test_compare_table(self, setup):
        cfg, ds = setup
        rows, fitted = pipeline.compare_models(ds, cfg)
        assert [r["model"] for r in rows] == ["main", "pair"]
        assert set(fitted) == {"main", "pair"}
        assert rows[0]["delta_logml"] == 0.0
        np.testing.assert_allclose(
            rows[1]["delta_logml"], rows[1]["logml"] - rows[0]["logml"], rtol=0, atol=0)
        for row in rows:
            assert row["error"] is None
            assert {"alpha0", "alpha1", "alpha2", "alpha3", "sigma",
                    "converged", "wall_time_s"} <= set(row)

    def test_compare_survives_single_failure(self, setup, tmp_path, caplog):
        models = [{"name": "main", "terms": ["0", "1", "2", "3"]},
                  {"name": "broken", "terms": ["0", "4"]}]
        path = write_inputs(tmp_path / "sub", extra={"models": models})
        cfg = load_config(path)
        ds = pipeline.run_ingest(cfg)
        rows, fitted = pipeline.compare_models(ds, cfg)
        assert rows[0]["error"] is None and "main" in fitted
        assert "broken" not in fitted
        assert "exceeds dimension" in rows[1]["error"]
        assert rows[1]["delta_logml"] is None


@pytest.fixture()
def fitted_pair(setup):
    cfg, ds = setup
    return cfg, ds, pipeline.fit_model(ds, cfg, "pair")


class TestEffectRequests:
    def test_parse_simple(self, setup):
        _, ds = setup
        terms, slices = pipeline.parse_effect_request("3", ds)
        assert terms == [(3,)] and slices == {}

    def test_parse_with_slice_by_name_and_number(self, setup):
        _, ds = setup
        by_name = pipeline.parse_effect_request("3+2:3@day=2016-03-02", ds)
        by_number = pipeline.parse_effect_request("3+2:3@2=2016-03-02", ds)
        assert by_name == by_number == ([(3,), (2, 3)], {2: 1})

    def test_parse_rejections(self, setup):
        _, ds = setup
        with pytest.raises(ConfigError, match="repeated"):
            pipeline.parse_effect_request("3+3", ds)
        with pytest.raises(ConfigError, match="not found"):
            pipeline.parse_effect_request("2:3@day=2099-01-01", ds)
        with pytest.raises(ConfigError, match="twice"):
            pipeline.parse_effect_request("2:3@day=2016-03-01,2=2016-03-02", ds)
        with pytest.raises(ConfigError, match="do not appear"):
            pipeline.parse_effect_request("3@station=s1", ds)
        with pytest.raises(ConfigError, match="unknown dimension"):
            pipeline.parse_effect_request("3@year=2016", ds)
        with pytest.raises(ConfigError, match="empty"):
            pipeline.parse_effect_request("   ", ds)

    def test_main_effect_sums_to_zero(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.evaluate_effect(fm, ds, "3")
        assert list(frame.columns) == ["hour", "hour_input", "mean"]
        assert len(frame) == 4
        tol = 1e-8 * np.abs(ds.y).max()
        assert abs(frame["mean"].sum()) <= tol

    def test_sliced_combination_matches_direct_terms(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.evaluate_effect(fm, ds, "3+2:3@day=2016-03-02")
        main = gp.term_posterior_mean(fm, (3,))
        inter = gp.term_posterior_mean(fm, (2, 3)).reshape(3, 4)
        np.testing.assert_allclose(frame["mean"].to_numpy(), main + inter[1], rtol=1e-12)
        assert set(frame["day"]) == {"2016-03-02"}

    def test_station_effect_carries_coordinate_columns(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.evaluate_effect(fm, ds, "1")
        assert list(frame.columns) == ["station", "station_input_1", "station_input_2", "mean"]
        np.testing.assert_allclose(frame["station_input_1"].to_numpy(), [1.0, 4.0])

    def test_variance_column_matches_core(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.evaluate_effect(fm, ds, "3+2:3@day=2016-03-02",
                                         include_variance=True)
        pts = {2: ds.level_inputs[1][1:2], 3: ds.level_inputs[2]}
        ref = gp.combined_posterior_variance(fm, [(3,), (2, 3)], pts).reshape(4)
        np.testing.assert_allclose(frame["variance"].to_numpy(), ref, rtol=1e-12)

    def test_constant_term_effect(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.evaluate_effect(fm, ds, "0")
        assert len(frame) == 1
        np.testing.assert_allclose(
            frame["mean"].iloc[0], float(gp.term_posterior_mean(fm, ())), rtol=1e-12)

    def test_unknown_term_rejected(self, setup):
        cfg, ds = setup
        fm = pipeline.fit_model(ds, cfg, "main")
        with pytest.raises(UnknownTermError, match="2:3"):
            pipeline.evaluate_effect(fm, ds, "2:3")

    def test_export_writes_csv_per_request(self, fitted_pair, tmp_path):
        _, ds, fm = fitted_pair
        out = tmp_path / "effects"
        paths = pipeline.export_effects(fm, ds, ["3", "3+2:3@day=2016-03-01"], out)
        assert [p.name for p in paths] == [
            "effect_3.csv", "effect_3_plus_2x3_at_day-2016-03-01.csv"]
        frame = pd.read_csv(paths[0])
        assert list(frame.columns) == ["hour", "hour_input", "mean"]


class TestPersistenceAndPredictions:
    def test_predictions_frame(self, fitted_pair):
        _, ds, fm = fitted_pair
        frame = pipeline.predictions_frame(fm, ds)
        assert len(frame) == ds.n
        np.testing.assert_array_equal(frame["observed"].to_numpy(), ds.y.ravel())
        means, variances = gp.predict(fm)
        np.testing.assert_allclose(frame["mean"].to_numpy(), means.ravel(), rtol=0)
        assert (frame["variance"].to_numpy() >= 0).all()

    def test_model_round_trip(self, fitted_pair, tmp_path):
        _, ds, fm = fitted_pair
        path = tmp_path / "model.json"
        pipeline.save_model(fm, path)
        back = pipeline.load_model(path, ds.level_inputs)
        np.testing.assert_allclose(back.logml, fm.logml, rtol=0, atol=0)
        np.testing.assert_allclose(back.w, fm.w, rtol=0, atol=0)
        a, b = gp.predict(fm), gp.predict(back)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)


class TestBench:
    def test_small_case_runs_dense_arm(self, tmp_path):
        path = write_inputs(tmp_path, extra={"bench": {"sizes": [[3, 4, 3]], "model": "main"}})
        cfg = load_config(path)
        rows = pipeline.run_bench(cfg)
        assert len(rows) == 1
        row = rows[0]
        assert row["sizes"] == "3x4x3" and row["n"] == 36
        assert row["rel_diff"] is not None and row["rel_diff"] < 1e-8
        assert row["note"] == ""
        assert row["solve_residual"] < 1e-6

    def test_large_case_skips_dense_arm(self, tmp_path):
        path = write_inputs(tmp_path, extra={"bench": {"sizes": [[18, 18, 18]], "model": "main"}})
        cfg = load_config(path)
        rows = pipeline.run_bench(cfg)
        row = rows[0]
        assert row["n"] == 5832
        assert row["rel_diff"] is None
        assert "skipped" in row["note"]

    def test_deterministic_for_seed(self, tmp_path):
        path = write_inputs(tmp_path, extra={"bench": {"sizes": [[3, 4, 3]]}})
        cfg = load_config(path)
        a = pipeline.run_bench(cfg, seed=5)
        b = pipeline.run_bench(cfg, seed=5)
        assert a[0]["structured_logml"] == b[0]["structured_logml"]

    def test_unknown_bench_model(self, tmp_path):
        path = write_inputs(tmp_path, extra={"bench": {"sizes": [[3, 4, 3]], "model": "zzz"}})
        cfg = load_config(path)
        with pytest.raises(ConfigError, match="bench model"):
            pipeline.run_bench(cfg)
