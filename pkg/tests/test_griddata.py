import numpy as np
import pandas as pd
import pytest

from anovagp.errors import ConfigError, DataError
from anovagp.griddata import DimensionMap, GridDataset, adjust_dst, impute, ingest


def panel_frame(stations=("B", "A"), days=("2020-03-01", "2020-03-02"), hours=24,
                value_fn=lambda s, d, h: 10.0 + h):
    rows = []
    for s in stations:
        for d in days:
            for h in range(hours):
                rows.append({"site": s, "date": d, "hour": str(h),
                             "no2": value_fn(s, d, h)})
    return pd.DataFrame(rows)


def panel_dims(coords=False):
    first = DimensionMap(name="station", key="site",
                         coords=("east", "north") if coords else ())
    return [first, DimensionMap(name="day", key="date"), DimensionMap(name="hour", key="hour")]


class TestIngest:
    def test_complete_grid(self):
        df = panel_frame()
        ds = ingest(df, panel_dims(), "no2")
        assert ds.sizes == (2, 2, 24) and ds.n == 96
        assert not ds.missing_mask.any()
        assert not np.isnan(ds.y).any()

    def test_single_empty_cell(self):
        df = panel_frame()
        df.loc[(df.site == "A") & (df.date == "2020-03-01") & (df.hour == "5"), "no2"] = np.nan
        ds = ingest(df, panel_dims(), "no2")
        assert ds.missing_mask.sum() == 1
        assert ds.missing_mask[0, 0, 5]  # station A sorts first
        assert np.isnan(ds.y[0, 0, 5])

    def test_missing_row_materialized(self):
        df = panel_frame()
        df = df[~((df.site == "B") & (df.date == "2020-03-02") & (df.hour == "0"))]
        ds = ingest(df, panel_dims(), "no2")
        assert ds.n == 96 and ds.missing_mask.sum() == 1
        assert ds.missing_mask[1, 1, 0]

    def test_levels_sorted_canonically(self):
        df = panel_frame()
        ds = ingest(df, panel_dims(), "no2")
        assert ds.level_labels[0] == ("A", "B")  # station identifiers ascending
        assert ds.level_labels[2][:3] == ("0", "1", "2")  # hours numeric, not lexicographic
        assert ds.level_labels[2][10] == "10"
        np.testing.assert_allclose(ds.level_inputs[1], [1.0, 2.0])  # days numbered from 1

    def test_duplicate_keys_rejected(self):
        df = panel_frame()
        df = pd.concat([df, df.iloc[[3]]], ignore_index=True)
        with pytest.raises(DataError, match="duplicate"):
            ingest(df, panel_dims(), "no2")

    def test_non_numeric_value_rejected(self):
        df = panel_frame()
        df["no2"] = df["no2"].astype(object)
        df.loc[2, "no2"] = "oops"
        with pytest.raises(DataError, match="non-numeric"):
            ingest(df, panel_dims(), "no2")

    def test_missing_column_rejected(self):
        with pytest.raises(ConfigError, match="missing columns"):
            ingest(panel_frame(), panel_dims(), "pm25")

    def test_unit_dropped_over_missing_fraction(self):
        df = panel_frame()
        # 17 of station B's 48 slots = 35% missing
        sel = (df.site == "B") & (df.date == "2020-03-01") & (df.hour.astype(int) < 17)
        df.loc[sel, "no2"] = np.nan
        ds = ingest(df, panel_dims(), "no2")
        assert ds.level_labels[0] == ("A",)
        assert ds.n == 48  # shrank by 2 days x 24 hours
        assert ds.meta["dropped_units"] == ["B"]

    def test_unit_dropped_over_long_run(self):
        df = panel_frame(days=tuple(f"2020-03-{d:02d}" for d in range(1, 11)))
        # 49 consecutive missing slots is over the limit at only 20% missing
        run = (df.site == "B") & (
            df.date.isin(["2020-03-02", "2020-03-03"])
            | ((df.date == "2020-03-04") & (df.hour == "0"))
        )
        assert run.sum() == 49
        df.loc[df.index[run], "no2"] = np.nan
        ds = ingest(df, panel_dims(), "no2")
        assert ds.level_labels[0] == ("A",)

    def test_unit_kept_at_threshold(self):
        df = panel_frame()
        sel = (df.site == "B") & (df.date == "2020-03-01") & (df.hour.astype(int) < 12)
        df.loc[sel, "no2"] = np.nan  # 12/48 = 25%, run of 12: under both limits
        ds = ingest(df, panel_dims(), "no2")
        assert ds.level_labels[0] == ("A", "B")

    def test_station_coordinates(self):
        df = panel_frame()
        df["east"] = np.where(df.site == "A", 530.0, 510.5)
        df["north"] = np.where(df.site == "A", 180.0, 175.25)
        ds = ingest(df, panel_dims(coords=True), "no2")
        np.testing.assert_allclose(ds.level_inputs[0], [[530.0, 180.0], [510.5, 175.25]])

    def test_inconsistent_coordinates_rejected(self):
        df = panel_frame()
        df["east"] = np.where(df.site == "A", 530.0, 510.5)
        df["north"] = 175.0
        df.loc[(df.site == "A") & (df.hour == "3"), "east"] = 999.0
        with pytest.raises(DataError, match="inconsistent coordinates"):
            ingest(df, panel_dims(coords=True), "no2")

    def test_offset_and_scale(self):
        df = panel_frame()
        dims = panel_dims()
        dims[2] = DimensionMap(name="hour", key="hour", inputs="value", offset=1.0, scale=0.5)
        ds = ingest(df, dims, "no2")
        np.testing.assert_allclose(ds.level_inputs[2], (np.arange(24) + 1.0) * 0.5)

    def test_layout_matches_row_values(self):
        df = panel_frame(value_fn=lambda s, d, h: (ord(s) * 1000 + int(d[-1]) * 100 + h))
        ds = ingest(df, panel_dims(), "no2")
        # C order: station outermost, hour innermost
        assert ds.y[0, 0, 3] == ord("A") * 1000 + 100 + 3
        assert ds.y[1, 1, 23] == ord("B") * 1000 + 200 + 23


class TestRoundTrips:
    def test_csv_round_trip(self, tmp_path):
        df = panel_frame()
        df.loc[5, "no2"] = np.nan
        df["east"] = np.where(df.site == "A", 530.25, 510.5)
        df["north"] = np.where(df.site == "A", 180.0, 175.125)
        ds = ingest(df, panel_dims(coords=True), "no2")
        path = tmp_path / "panel.csv"
        ds.to_long_csv(path)
        again = ingest(path, panel_dims(coords=True), "no2")
        assert ds.equals(again)

    def test_npz_round_trip(self, tmp_path):
        df = panel_frame()
        df.loc[7, "no2"] = np.nan
        ds = ingest(df, panel_dims(), "no2")
        path = tmp_path / "panel.npz"
        ds.save(path)
        again = GridDataset.load(path)
        assert ds.equals(again)
        assert again.meta["value_column"] == "no2"


def dst_dataset(units=2, days=("2020-03-28", "2020-03-29"), hours=4, seed=0):
    rng = np.random.default_rng(seed)
    labels_u = tuple(chr(ord("A") + i) for i in range(units))
    y = rng.uniform(10, 20, size=(units, len(days), hours))
    return GridDataset(
        dim_names=("station", "day", "hour"),
        level_inputs=(np.arange(units, dtype=float), np.arange(1, len(days) + 1, dtype=float),
                      np.arange(hours, dtype=float)),
        level_labels=(labels_u, days, tuple(str(h) for h in range(hours))),
        y=y,
        missing_mask=np.zeros((units, len(days), hours), dtype=bool),
    )


class TestAdjustDst:
    def test_gap_filled_with_neighbor_mean(self):
        ds = dst_dataset()
        out = adjust_dst(ds, "2020-03-29T01:00")
        t = 5  # day 2, hour 1 in a 4-hour day
        for u in range(2):
            old = ds.y[u].ravel()
            new = out.y[u].ravel()
            np.testing.assert_array_equal(new[:t], old[:t])
            assert new[t] == pytest.approx((old[t - 1] + old[t]) / 2)
            np.testing.assert_array_equal(new[t + 1:], old[t:-1])

    def test_tuple_transition_spec(self):
        ds = dst_dataset()
        a = adjust_dst(ds, "2020-03-29T01:00")
        b = adjust_dst(ds, ("2020-03-29", "1"))
        assert a.equals(b)

    def test_out_of_range_transition_is_identity(self):
        ds = dst_dataset()
        out = adjust_dst(ds, "2021-03-28T01:00")
        assert out.equals(ds)

    def test_units_adjusted_independently(self):
        ds = dst_dataset(units=3, seed=4)
        out = adjust_dst(ds, ("2020-03-29", "2"))
        single = adjust_dst(
            GridDataset(
                dim_names=ds.dim_names,
                level_inputs=(ds.level_inputs[0][:1],) + ds.level_inputs[1:],
                level_labels=(ds.level_labels[0][:1],) + ds.level_labels[1:],
                y=ds.y[:1],
                missing_mask=ds.missing_mask[:1],
            ),
            ("2020-03-29", "2"),
        )
        np.testing.assert_array_equal(out.y[0], single.y[0])

    def test_gap_missing_when_neighbor_missing(self):
        ds = dst_dataset()
        ds.missing_mask[0, 1, 0] = True
        ds.y[0, 1, 0] = np.nan
        out = adjust_dst(ds, ("2020-03-29", "1"))
        assert out.missing_mask[0, 1, 1] and np.isnan(out.y[0, 1, 1])
        assert not out.missing_mask[1, 1, 1]  # other unit unaffected

    def test_boundary_transition_rejected(self):
        ds = dst_dataset()
        with pytest.raises(DataError, match="first or last"):
            adjust_dst(ds, ("2020-03-28", "0"))
        with pytest.raises(DataError, match="first or last"):
            adjust_dst(ds, ("2020-03-29", "3"))

    def test_unknown_hour_rejected(self):
        ds = dst_dataset()
        with pytest.raises(DataError, match="hour"):
            adjust_dst(ds, ("2020-03-29", "9"))

    def test_exactly_one_synthesized_slot_per_unit(self):
        ds = dst_dataset(units=2, hours=6, seed=9)
        out = adjust_dst(ds, ("2020-03-29", "2"))
        for u in range(2):
            old_vals = set(ds.y[u].ravel().tolist())
            new = out.y[u].ravel()
            fresh = [v for v in new if v not in old_vals]
            assert len(fresh) == 1  # only the gap is new, all else is original


def series_dataset(values, mask=None):
    values = np.asarray(values, dtype=float)
    n = values.size
    if mask is None:
        mask = np.isnan(values)
    return GridDataset(
        dim_names=("unit", "hour"),
        level_inputs=(np.array([1.0]), np.arange(n, dtype=float)),
        level_labels=(("U",), tuple(str(i) for i in range(n))),
        y=values.reshape(1, n),
        missing_mask=np.asarray(mask, dtype=bool).reshape(1, n),
    )


class TestImpute:
    def test_constant_series(self):
        vals = np.full(30, 7.25)
        vals[13] = np.nan
        out = impute(series_dataset(vals))
        assert out.y[0, 13] == pytest.approx(7.25, abs=1e-4)

    def test_linear_ramp(self):
        vals = 2.0 + 0.5 * np.arange(40)
        expected = vals[21]
        vals = vals.copy()
        vals[21] = np.nan
        out = impute(series_dataset(vals))
        assert abs(out.y[0, 21] - expected) <= 0.05 * abs(expected)

    def test_observed_untouched_and_mask_preserved(self):
        rng = np.random.default_rng(77)
        vals = rng.uniform(5, 15, size=60)
        holes = [7, 30, 31, 55]
        truth = vals.copy()
        vals[holes] = np.nan
        ds = series_dataset(vals)
        out = impute(ds)
        keep = np.ones(60, dtype=bool)
        keep[holes] = False
        assert np.array_equal(out.y[0, keep], truth[keep])  # bit-for-bit
        assert np.array_equal(out.missing_mask, ds.missing_mask)
        assert not np.isnan(out.y).any()

    def test_adjacent_missing_use_only_originals(self):
        rng = np.random.default_rng(78)
        vals = rng.uniform(5, 15, size=50)
        vals[[20, 21]] = np.nan
        clean = impute(series_dataset(vals))
        poisoned_vals = vals.copy()
        poisoned_vals[20] = 1e6  # masked slot carries garbage; must never train
        mask = np.isnan(vals)
        out = impute(series_dataset(poisoned_vals, mask=mask))
        np.testing.assert_array_equal(clean.y, out.y)

    def test_window_truncated_at_series_edges(self):
        vals = np.full(10, 3.0)
        vals[0] = np.nan
        out = impute(series_dataset(vals))
        assert out.y[0, 0] == pytest.approx(3.0, abs=1e-3)

    def test_empty_window_rejected(self):
        vals = np.arange(100, dtype=float)
        vals[20:81] = np.nan
        # slot 44 is the first (chronological) slot whose whole window is missing
        with pytest.raises(DataError, match="slot 44"):
            impute(series_dataset(vals))

    def test_three_level_series_crosses_day_boundary(self):
        rng = np.random.default_rng(79)
        y = rng.uniform(10, 20, size=(2, 3, 8))
        mask = np.zeros_like(y, dtype=bool)
        mask[0, 1, 0] = True  # needs the previous day's tail as context
        y[0, 1, 0] = np.nan
        ds = GridDataset(
            dim_names=("station", "day", "hour"),
            level_inputs=(np.arange(2.0), np.arange(1.0, 4.0), np.arange(8.0)),
            level_labels=(("A", "B"), ("d1", "d2", "d3"), tuple(str(h) for h in range(8))),
            y=y,
            missing_mask=mask,
        )
        out = impute(ds)
        assert np.isfinite(out.y).all()
        lo, hi = np.nanmin(y[0].ravel()[0:16]), np.nanmax(y[0].ravel()[0:16])
        assert lo - 5 <= out.y[0, 1, 0] <= hi + 5  # stays near the local data
