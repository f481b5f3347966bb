"""Gridded panel data: long-format ingestion, clock-change adjustment,
and window-based imputation of missing values.

A GridDataset holds a complete Cartesian grid: one response slot per
combination of per-dimension levels, laid out in C order (last dimension
fastest), matching the layout contract of the kron module. Missing
responses are NaN until imputed; missing_mask records which slots were
originally missing and is never rewritten by imputation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from datetime import datetime

import numpy as np
import pandas as pd

from .anova import HyperParams, TermCollection
from .errors import ConfigError, DataError
from .kernels import KernelSpec

logger = logging.getLogger(__name__)

DEFAULT_MISSING_FRACTION = 0.30
DEFAULT_MISSING_RUN = 48
IMPUTE_HALF_WINDOW = 24


@dataclasses.dataclass(frozen=True)
class DimensionMap:
    """How one grid dimension is read off the long table.

    key is the column holding level identifiers. Numeric inputs for the
    kernel come from one of four modes:
      value  - parse the identifier itself as a number
      date   - parse as a calendar date, numbered 1, 2, ... from the first
      rank   - position in sorted identifier order, numbered 1, 2, ...
      coords - read the listed coordinate columns (constant per level)
    auto picks value, then date, then rank, whichever parses. The affine
    map x -> (x + offset) * scale is applied to the resulting inputs.
    """

    name: str
    key: str
    coords: tuple[str, ...] = ()
    inputs: str = "auto"
    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.inputs not in ("auto", "value", "date", "rank", "coords"):
            raise ConfigError(f"unknown inputs mode {self.inputs!r} for dimension {self.name!r}")
        if self.inputs == "coords" and not self.coords:
            raise ConfigError(f"dimension {self.name!r} uses coords mode but lists no columns")
        if self.coords and self.inputs not in ("auto", "coords"):
            raise ConfigError(f"dimension {self.name!r} lists coordinate columns but mode is {self.inputs!r}")
        object.__setattr__(self, "coords", tuple(self.coords))
        if not (np.isfinite(self.offset) and np.isfinite(self.scale) and self.scale != 0):
            raise ConfigError(f"bad offset/scale for dimension {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "key": self.key,
            "coords": list(self.coords),
            "inputs": self.inputs,
            "offset": self.offset,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DimensionMap":
        return cls(
            name=d["name"],
            key=d["key"],
            coords=tuple(d.get("coords", ())),
            inputs=d.get("inputs", "auto"),
            offset=float(d.get("offset", 0.0)),
            scale=float(d.get("scale", 1.0)),
        )


@dataclasses.dataclass
class GridDataset:
    """A complete grid of responses that tracks which slots were missing.

    level_inputs[l] is (n_l,) or (n_l, k_l) float, level_labels[l] the
    original identifiers as strings, y the response grid with NaN at
    unfilled slots, missing_mask True where the response was originally
    absent. meta carries ingestion bookkeeping (dimension maps, raw
    coordinates, dropped units).
    """

    dim_names: tuple
    level_inputs: tuple
    level_labels: tuple
    y: np.ndarray
    missing_mask: np.ndarray
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.dim_names = tuple(str(s) for s in self.dim_names)
        self.level_inputs = tuple(np.asarray(a, dtype=float) for a in self.level_inputs)
        self.level_labels = tuple(tuple(str(s) for s in labs) for labs in self.level_labels)
        self.y = np.asarray(self.y, dtype=float)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        d = len(self.dim_names)
        if not (len(self.level_inputs) == len(self.level_labels) == d):
            raise ConfigError("dimension names, inputs, and labels must align")
        sizes = tuple(a.shape[0] for a in self.level_inputs)
        for labs, s, name in zip(self.level_labels, sizes, self.dim_names):
            if len(labs) != s:
                raise ConfigError(f"dimension {name!r}: {len(labs)} labels for {s} input rows")
        if self.y.shape != sizes or self.missing_mask.shape != sizes:
            raise ConfigError(f"grid arrays must have shape {sizes}, got {self.y.shape} and {self.missing_mask.shape}")

    @property
    def d(self) -> int:
        return len(self.dim_names)

    @property
    def sizes(self) -> tuple:
        return tuple(a.shape[0] for a in self.level_inputs)

    @property
    def n(self) -> int:
        return int(np.prod(self.sizes))

    def copy(self) -> "GridDataset":
        return GridDataset(
            dim_names=self.dim_names,
            level_inputs=tuple(a.copy() for a in self.level_inputs),
            level_labels=self.level_labels,
            y=self.y.copy(),
            missing_mask=self.missing_mask.copy(),
            meta=json.loads(json.dumps(self.meta)),
        )

    def equals(self, other: "GridDataset") -> bool:
        if self.dim_names != other.dim_names or self.level_labels != other.level_labels:
            return False
        if len(self.level_inputs) != len(other.level_inputs):
            return False
        for a, b in zip(self.level_inputs, other.level_inputs):
            if not np.array_equal(a, b):
                return False
        return np.array_equal(self.y, other.y, equal_nan=True) and np.array_equal(
            self.missing_mask, other.missing_mask
        )

    def save(self, path) -> None:
        arrays = {
            "y": self.y,
            "missing_mask": self.missing_mask,
            "dim_names": np.array(self.dim_names, dtype=str),
            "meta": np.array(json.dumps(self.meta)),
        }
        for l, (inp, labs) in enumerate(zip(self.level_inputs, self.level_labels)):
            arrays[f"inputs_{l}"] = inp
            arrays[f"labels_{l}"] = np.array(labs, dtype=str)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "GridDataset":
        with np.load(path, allow_pickle=False) as z:
            names = tuple(z["dim_names"])
            d = len(names)
            return cls(
                dim_names=names,
                level_inputs=tuple(z[f"inputs_{l}"] for l in range(d)),
                level_labels=tuple(tuple(z[f"labels_{l}"]) for l in range(d)),
                y=z["y"],
                missing_mask=z["missing_mask"],
                meta=json.loads(str(z["meta"])),
            )

    def to_long(self) -> pd.DataFrame:
        """Long-format table that ingest() maps back to this dataset."""
        dims = [DimensionMap.from_dict(d) for d in self.meta.get("dims", [])]
        if len(dims) != self.d:
            dims = [DimensionMap(name=n, key=n, inputs="rank") for n in self.dim_names]
        raw_coords = self.meta.get("raw_coords", {})
        grids = np.meshgrid(*[np.arange(s) for s in self.sizes], indexing="ij")
        out = {}
        for l, dm in enumerate(dims):
            labs = np.array(self.level_labels[l], dtype=object)
            out[dm.key] = labs[grids[l].ravel()]
            coords = raw_coords.get(str(l))
            if coords is not None:
                coords = np.asarray(coords, dtype=float)
                for j, col in enumerate(dm.coords):
                    out[col] = coords[grids[l].ravel(), j]
        value_col = self.meta.get("value_column", "value")
        out[value_col] = self.y.ravel()
        return pd.DataFrame(out)

    def to_long_csv(self, path) -> None:
        # empty field = missing, full-precision floats for exact round trips
        df = self.to_long()
        df.to_csv(path, index=False, na_rep="")


def _parse_all_float(labels):
    try:
        return np.array([float(s) for s in labels])
    except ValueError:
        return None


def _parse_all_date(labels):
    try:
        parsed = pd.to_datetime(list(labels), format="ISO8601")
    except (ValueError, TypeError):
        return None
    return parsed


def _level_order_and_inputs(dm: DimensionMap, labels, coord_table):
    """Sorted level labels plus their numeric inputs for one dimension."""
    labels = list(labels)
    mode = dm.inputs
    if mode == "auto":
        if dm.coords:
            mode = "coords"
        elif _parse_all_float(labels) is not None:
            mode = "value"
        elif _parse_all_date(labels) is not None:
            mode = "date"
        else:
            mode = "rank"
    if mode == "coords":
        order = sorted(range(len(labels)), key=lambda i: labels[i])
        ordered = [labels[i] for i in order]
        raw = np.array([coord_table[lab] for lab in ordered], dtype=float)
        return ordered, raw, raw
    if mode == "value":
        vals = _parse_all_float(labels)
        if vals is None:
            raise DataError(f"dimension {dm.name!r}: level identifiers are not numeric")
        order = np.argsort(vals, kind="stable")
        return [labels[i] for i in order], vals[order], vals[order]
    if mode == "date":
        parsed = _parse_all_date(labels)
        if parsed is None:
            raise DataError(f"dimension {dm.name!r}: level identifiers are not ISO dates")
        order = np.argsort(parsed.values, kind="stable")
        ordered = [labels[i] for i in order]
        days = (parsed[order] - parsed.min()).days.to_numpy(dtype=float) + 1.0
        return ordered, days, days
    order = sorted(range(len(labels)), key=lambda i: labels[i])
    ranks = np.arange(1, len(labels) + 1, dtype=float)
    return [labels[i] for i in order], ranks, ranks


def _read_long_table(source, columns):
    if isinstance(source, pd.DataFrame):
        df = source.astype(str).copy()
        # NaN cells in a frame arrive as the string "nan" after astype
        df = df.replace({"nan": ""})
    else:
        df = pd.read_csv(source, dtype=str, keep_default_na=False)
    missing_cols = [c for c in columns if c not in df.columns]
    if missing_cols:
        raise ConfigError(f"missing columns in input table: {missing_cols}")
    return df


def ingest(
    source,
    dims,
    value: str,
    *,
    drop_threshold: float = DEFAULT_MISSING_FRACTION,
    max_missing_run: int = DEFAULT_MISSING_RUN,
    drop_units: bool = True,
    dst_transition=None,
) -> GridDataset:
    """Build a complete grid from a long table (CSV path or DataFrame).

    Every key combination maps to one slot; rows may be absent or carry an
    empty value cell, both count as missing. Duplicated key combinations
    are an error. When drop_units is set and there are at least two
    dimensions, first-dimension levels whose missing fraction exceeds
    drop_threshold or whose longest missing run exceeds max_missing_run
    are removed with a warning. An optional clock-change transition is
    applied last, see adjust_dst.
    """
    dims = [dm if isinstance(dm, DimensionMap) else DimensionMap.from_dict(dm) for dm in dims]
    if not dims:
        raise ConfigError("at least one dimension is required")
    keys = [dm.key for dm in dims]
    needed = keys + [value] + [c for dm in dims for c in dm.coords]
    df = _read_long_table(source, needed)

    dup = df.duplicated(subset=keys, keep=False)
    if dup.any():
        offenders = df.loc[dup, keys].drop_duplicates().head(5).to_dict("records")
        raise DataError(f"duplicate key combinations in input: {offenders}")

    raw_vals = df[value].str.strip()
    values = pd.to_numeric(raw_vals, errors="coerce")
    bad = raw_vals.ne("") & values.isna()
    if bad.any():
        first = df.loc[bad, [*keys, value]].iloc[0].to_dict()
        raise DataError(f"non-numeric value cell: {first}")

    level_labels = []
    level_inputs = []
    raw_coords = {}
    for l, dm in enumerate(dims):
        labels = sorted(df[dm.key].unique())
        coord_table = {}
        if dm.coords:
            sub = df[[dm.key, *dm.coords]].drop_duplicates()
            counts = sub.groupby(dm.key, sort=False).size()
            inconsistent = counts[counts > 1]
            if len(inconsistent):
                raise DataError(
                    f"dimension {dm.name!r}: inconsistent coordinates for levels "
                    f"{list(inconsistent.index[:5])}"
                )
            for _, row in sub.iterrows():
                coord_table[row[dm.key]] = [float(row[c]) for c in dm.coords]
        ordered, raw, _ = _level_order_and_inputs(dm, labels, coord_table)
        level_labels.append(tuple(ordered))
        level_inputs.append((np.asarray(raw, dtype=float) + dm.offset) * dm.scale)
        if dm.coords:
            raw_coords[str(l)] = np.asarray(raw, dtype=float).tolist()

    sizes = tuple(len(labs) for labs in level_labels)
    y = np.full(sizes, np.nan)
    mask = np.ones(sizes, dtype=bool)
    index_of = [{lab: i for i, lab in enumerate(labs)} for labs in level_labels]
    idx = np.stack(
        [df[dm.key].map(index_of[l]).to_numpy(dtype=np.intp) for l, dm in enumerate(dims)]
    )
    flat = np.ravel_multi_index(idx, sizes)
    vals = values.to_numpy(dtype=float)
    y.flat[flat] = vals
    mask.flat[flat] = np.isnan(vals)

    meta = {
        "dims": [dm.to_dict() for dm in dims],
        "value_column": value,
        "raw_coords": raw_coords,
        "dropped_units": [],
    }
    ds = GridDataset(
        dim_names=tuple(dm.name for dm in dims),
        level_inputs=tuple(level_inputs),
        level_labels=tuple(level_labels),
        y=y,
        missing_mask=mask,
        meta=meta,
    )
    if drop_units and ds.d >= 2:
        ds = _drop_unreliable_units(ds, drop_threshold, max_missing_run)
    if dst_transition is not None:
        ds = adjust_dst(ds, dst_transition)
    return ds


def _longest_run(flags: np.ndarray) -> int:
    best = cur = 0
    for f in flags:
        cur = cur + 1 if f else 0
        best = max(best, cur)
    return best


def _drop_unreliable_units(ds: GridDataset, threshold: float, max_run: int) -> GridDataset:
    keep = []
    dropped = []
    for i, lab in enumerate(ds.level_labels[0]):
        series = ds.missing_mask[i].ravel()
        frac = float(series.mean())
        run = _longest_run(series)
        if frac > threshold or run > max_run:
            dropped.append(lab)
            logger.warning(
                "dropping unit %s: missing fraction %.3f, longest missing run %d",
                lab, frac, run,
            )
        else:
            keep.append(i)
    if not keep:
        raise DataError("every unit exceeds the missing-data thresholds")
    if not dropped:
        return ds
    meta = dict(ds.meta)
    meta["dropped_units"] = list(meta.get("dropped_units", [])) + list(dropped)
    if "0" in meta.get("raw_coords", {}):
        raw = np.asarray(meta["raw_coords"]["0"], dtype=float)
        meta = {**meta, "raw_coords": {**meta["raw_coords"], "0": raw[keep].tolist()}}
    return GridDataset(
        dim_names=ds.dim_names,
        level_inputs=(ds.level_inputs[0][keep],) + ds.level_inputs[1:],
        level_labels=(tuple(ds.level_labels[0][i] for i in keep),) + ds.level_labels[1:],
        y=ds.y[keep],
        missing_mask=ds.missing_mask[keep],
        meta=meta,
    )


def _locate_transition(ds: GridDataset, transition):
    """Map a transition spec to (day index, hour index) in the last two
    dims. Returns None when the transition day falls outside the day
    range (the adjustment is then a no-op)."""
    if ds.d < 2:
        raise DataError("clock-change adjustment needs day and hour dimensions")
    day_labels = ds.level_labels[-2]
    hour_labels = ds.level_labels[-1]
    parsed_days = _parse_all_date(day_labels)

    if isinstance(transition, (tuple, list)) and len(transition) == 2:
        day_s, hour_s = str(transition[0]), str(transition[1])
        if day_s not in day_labels:
            given = _parse_all_date([day_s])
            if parsed_days is not None and given is not None:
                if given[0] < parsed_days.min() or given[0] > parsed_days.max():
                    return None
            raise DataError(f"transition day {day_s!r} not in the day range")
        if hour_s not in hour_labels:
            raise DataError(f"transition hour {hour_s!r} not among the hour levels")
        return day_labels.index(day_s), hour_labels.index(hour_s)

    ts = datetime.fromisoformat(str(transition))
    if parsed_days is None:
        raise DataError("day levels are not ISO dates; pass (day_label, hour_label) instead")
    match = [i for i, p in enumerate(parsed_days) if p.date() == ts.date()]
    if not match:
        if ts.date() < parsed_days.min().date() or ts.date() > parsed_days.max().date():
            return None
        raise DataError(f"transition day {ts.date()} not in the day range")
    hours = _parse_all_float(hour_labels)
    if hours is None:
        raise DataError("hour levels are not numeric; pass (day_label, hour_label) instead")
    hmatch = np.nonzero(hours == float(ts.hour))[0]
    if hmatch.size == 0:
        raise DataError(f"transition hour {ts.hour} not among the hour levels")
    return match[0], int(hmatch[0])


def adjust_dst(ds: GridDataset, transition) -> GridDataset:
    """Shift each unit's records at and after the transition slot forward
    by one hour slot, filling the opened gap with the mean of its two
    neighbors. The record in each unit's final slot falls off the grid.

    transition is an ISO timestamp (day levels must parse as dates) or a
    (day_label, hour_label) pair. The gap is left missing when either
    neighbor is missing. Applied independently per unit; the grid labels
    are unchanged.
    """
    located = _locate_transition(ds, transition)
    if located is None:
        logger.info("transition %s outside the day range, nothing to adjust", transition)
        return ds
    day_idx, hour_idx = located
    n_hour = ds.sizes[-1]
    t = day_idx * n_hour + hour_idx
    series_len = ds.sizes[-2] * n_hour
    if t == 0 or t == series_len - 1:
        raise DataError("transition at the first or last slot of the series")

    y = ds.y.reshape(-1, series_len).copy()
    mask = ds.missing_mask.reshape(-1, series_len).copy()
    gap_ok = ~mask[:, t - 1] & ~mask[:, t]
    gap_val = np.where(gap_ok, (y[:, t - 1] + y[:, t]) / 2.0, np.nan)
    y[:, t + 1 :] = y[:, t:-1]
    mask[:, t + 1 :] = mask[:, t:-1]
    y[:, t] = gap_val
    mask[:, t] = ~gap_ok

    meta = dict(ds.meta)
    meta["dst_transition"] = {
        "day": ds.level_labels[-2][day_idx],
        "hour": ds.level_labels[-1][hour_idx],
        "slot": int(t),
    }
    return GridDataset(
        dim_names=ds.dim_names,
        level_inputs=ds.level_inputs,
        level_labels=ds.level_labels,
        y=y.reshape(ds.sizes),
        missing_mask=mask.reshape(ds.sizes),
        meta=meta,
    )


def _impute_window_model():
    spec = KernelSpec("fbm", gamma=0.5, centred=True, squared=True)
    terms = TermCollection(1, ((), (1,)))
    return spec, terms


def impute(ds: GridDataset, *, half_window: int = IMPUTE_HALF_WINDOW, fit_config=None) -> GridDataset:
    """Fill every missing slot with the posterior predictive mean of a 1-D
    GP fitted to the same unit's observed values within half_window slots
    on each side (window truncated at the series ends).

    The window kernel is the squared and centred Brownian motion kernel,
    refitted per window by marginal likelihood. Slots are processed in
    chronological order per unit; imputed values are never used as
    training data, only originally observed ones. Observed values are
    returned bit-for-bit unchanged and missing_mask is preserved.
    """
    from . import gp  # deferred: gp imports nothing from here

    if ds.d >= 2:
        series_len = int(np.prod(ds.sizes[1:]))
        units = ds.sizes[0]
    else:
        series_len = ds.sizes[0]
        units = 1
    y = ds.y.reshape(units, series_len).copy()
    observed = ~ds.missing_mask.reshape(units, series_len)

    spec, terms = _impute_window_model()
    for u in range(units):
        unit_label = ds.level_labels[0][u] if ds.d >= 2 else "0"
        missing_slots = np.nonzero(~observed[u])[0]
        for p in missing_slots:
            lo = max(0, p - half_window)
            hi = min(series_len, p + half_window + 1)
            window = np.arange(lo, hi)
            train = window[observed[u, lo:hi]]
            if train.size == 0:
                raise DataError(
                    f"no observed values within {half_window} slots of unit "
                    f"{unit_label}, slot {p}"
                )
            ms = gp.ModelState(
                inputs=(train.astype(float),),
                specs=(spec,),
                terms=terms,
                hp=HyperParams.unit(1),
            )
            fm = gp.fit(ms, y[u, train], fit_config)
            mean, _ = gp.predict(fm, {1: np.array([float(p)])})
            y[u, p] = mean.ravel()[0]

    out = ds.copy()
    out.y = y.reshape(ds.sizes)
    if np.isnan(out.y).any():
        raise DataError("imputation left unfilled slots")
    return out
