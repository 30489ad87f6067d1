"""Catchment datasets: CSV I/O, normalization, splits, batching, masking.

File layout
-----------
Dynamic data, one file per catchment named ``<catchment_id>.csv``::

    date,precipitation_mm_day,...,discharge_m3_s[,upstream_discharge_m3_s]

``date`` is ISO-8601 (YYYY-MM-DD) and must be gap-free. ``discharge_m3_s``
is required; empty cells mean "not observed". Any other column is read as a
dynamic variable.

Static attributes live in one file with a ``catchment_id`` column followed by
one column per attribute.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

DISCHARGE = "discharge_m3_s"
UPSTREAM = "upstream_discharge_m3_s"

# Order used when assembling feature matrices.
DYNAMIC_ROSTER = (
    "precipitation_mm_day",
    "evaporation_mm_day",
    "temperature_2m_k",
    "snow_depth_water_equivalent_m",
    "soil_water_volume_m3",
    "wind_u_10m_m_s",
    "wind_v_10m_m_s",
    "surface_net_solar_radiation_j_m2",
    "surface_net_thermal_radiation_j_m2",
    DISCHARGE,
    UPSTREAM,
)
STATIC_ROSTER = (
    "gauge_elevation_m",
    "area_km2",
    "average_slope_deg",
    "mean_annual_temperature_k",
    "climate_moisture_index",
    "snow_cover_extent_pct",
    "reservoir_retention",
    "reservoir_outflow_m3_s_per_mm",
)
# Optional per-catchment inputs; everything else is treated as shared.
OPTIONAL_VARIABLES = (DISCHARGE, UPSTREAM)
# Variables log1p-transformed before z-scoring.
LOG_VARIABLES = (UPSTREAM,)
PLACEHOLDER = 0.0


class ConfigurationError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class DataIntegrityError(ValueError):
    pass


def _roster_sort(names) -> list[str]:
    order = {n: k for k, n in enumerate(DYNAMIC_ROSTER + STATIC_ROSTER)}
    return sorted(names, key=lambda n: (order.get(n, len(order)), n))


@dataclass(frozen=True)
class CatchmentDataset:
    catchment_id: str
    dates: np.ndarray  # datetime64[D], contiguous
    dynamic: Mapping[str, np.ndarray]
    static: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.dates)
        for name, series in self.dynamic.items():
            if len(series) != n:
                raise DataIntegrityError(
                    f"{self.catchment_id}: {name} has {len(series)} values for {n} dates"
                )
        if n > 1 and np.any(np.diff(self.dates).astype(int) != 1):
            raise DataIntegrityError(f"{self.catchment_id}: dates are not contiguous")
        q = self.dynamic.get(DISCHARGE)
        if q is not None and np.any(q[~np.isnan(q)] < 0):
            raise DataIntegrityError(f"{self.catchment_id}: negative discharge")

    @property
    def discharge(self) -> np.ndarray:
        return self.dynamic[DISCHARGE]

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(int) + 1970

    @property
    def variables(self) -> list[str]:
        return _roster_sort(self.dynamic)

    def has(self, name: str) -> bool:
        return name in self.dynamic or name in self.static


def shared_variables(datasets: Sequence[CatchmentDataset]) -> list[str]:
    """Dynamic and static variables present at every catchment, minus optional ones."""
    dyn = set.intersection(*(set(d.dynamic) for d in datasets)) - set(OPTIONAL_VARIABLES)
    sta = set.intersection(*(set(d.static) for d in datasets))
    return _roster_sort(dyn) + _roster_sort(sta)


def record_years(datasets: Sequence[CatchmentDataset]) -> list[int]:
    years = set.intersection(*(set(np.unique(d.years).tolist()) for d in datasets))
    return sorted(int(y) for y in years)


# ---------------------------------------------------------------- CSV I/O


def ingest_csv(paths: Sequence[str | Path], static_path: str | Path | None = None):
    """Read dynamic CSVs (and optionally a static CSV) into datasets."""
    statics: dict[str, dict[str, float]] = {}
    if static_path is not None:
        statics = read_static_csv(static_path)
    out = []
    for path in sorted(Path(p) for p in paths):
        cid = path.stem
        out.append(_read_dynamic_csv(path, cid, statics.get(cid, {})))
    if statics:
        unknown = sorted(set(statics) - {d.catchment_id for d in out})
        if unknown:
            log.warning("static attributes for unknown catchments ignored: %s", unknown)
    return out


def _read_dynamic_csv(path: Path, cid: str, static: dict[str, float]) -> CatchmentDataset:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestionError(f"{path}: cannot read CSV ({exc})") from exc
    for col in ("date", DISCHARGE):
        if col not in frame.columns:
            raise IngestionError(f"{path}: missing required column {col!r}")
    dates = pd.to_datetime(frame["date"], format="%Y-%m-%d", errors="coerce")
    bad = np.flatnonzero(dates.isna().to_numpy())
    if bad.size:
        line = int(bad[0]) + 2
        raise IngestionError(f"{path}:{line}: unparseable date {frame['date'].iloc[bad[0]]!r}")
    d = dates.to_numpy().astype("datetime64[D]")
    if len(d) == 0:
        raise IngestionError(f"{path}: no rows")
    steps = np.diff(d).astype(int)
    if np.any(steps <= 0):
        line = int(np.flatnonzero(steps <= 0)[0]) + 3
        raise IngestionError(f"{path}:{line}: dates must be strictly increasing")
    if np.any(steps > 1):
        full = np.arange(d[0], d[-1] + 1)
        missing = np.setdiff1d(full, d)
        shown = ", ".join(str(x) for x in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise IngestionError(f"{path}: gap in date index, missing {shown}{more}")
    dynamic = {}
    for col in frame.columns:
        if col == "date":
            continue
        raw = frame[col].str.strip()
        values = pd.to_numeric(raw.replace("", np.nan), errors="coerce").to_numpy(dtype=np.float64)
        unparsed = np.flatnonzero(np.isnan(values) & (raw != "").to_numpy())
        if unparsed.size:
            line = int(unparsed[0]) + 2
            raise IngestionError(f"{path}:{line}: non-numeric value in column {col!r}")
        # to_numeric is not correctly rounded; astype parses each cell exactly
        dynamic[col] = raw.replace("", "nan").astype(np.float64).to_numpy()
    q = dynamic[DISCHARGE]
    neg = np.flatnonzero(q < 0)
    if neg.size:
        raise IngestionError(f"{path}:{int(neg[0]) + 2}: negative discharge {q[neg[0]]}")
    return CatchmentDataset(cid, d, dynamic, dict(static))


def read_static_csv(path: str | Path) -> dict[str, dict[str, float]]:
    path = Path(path)
    frame = pd.read_csv(path, dtype={"catchment_id": str}, float_precision="round_trip")
    if "catchment_id" not in frame.columns:
        raise IngestionError(f"{path}: missing required column 'catchment_id'")
    out = {}
    for k, row in frame.iterrows():
        try:
            out[row["catchment_id"]] = {
                c: float(row[c]) for c in frame.columns if c != "catchment_id"
            }
        except ValueError as exc:
            raise IngestionError(f"{path}:{k + 2}: {exc}") from exc
    return out


def export_csv(datasets: Sequence[CatchmentDataset], directory: str | Path) -> list[Path]:
    """Write ``<id>.csv`` per catchment plus ``static.csv``; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in datasets:
        frame = pd.DataFrame({"date": np.datetime_as_string(ds.dates, unit="D")})
        for name in ds.variables:
            frame[name] = ds.dynamic[name]
        path = directory / f"{ds.catchment_id}.csv"
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        written.append(path)
    static_names = _roster_sort(set().union(*(d.static for d in datasets)))
    if static_names:
        rows = [
            {"catchment_id": d.catchment_id, **{n: d.static.get(n, np.nan) for n in static_names}}
            for d in datasets
        ]
        path = directory / "static.csv"
        pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        written.append(path)
    return written


def load_directory(directory: str | Path) -> list[CatchmentDataset]:
    """Ingest every ``*.csv`` in a directory, treating ``static.csv`` as attributes."""
    directory = Path(directory)
    static = directory / "static.csv"
    paths = sorted(p for p in directory.glob("*.csv") if p.name != "static.csv")
    if not paths:
        raise IngestionError(f"{directory}: no catchment CSV files found")
    return ingest_csv(paths, static if static.exists() else None)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitPlan:
    fold_id: int
    test_year: int | None
    validation_years: tuple[int, ...]
    training_years: tuple[int, ...]

    def __post_init__(self):
        test = {self.test_year} if self.test_year is not None else set()
        val, train = set(self.validation_years), set(self.training_years)
        if test & val or test & train or val & train:
            raise ConfigurationError(f"fold {self.fold_id}: year sets overlap")
        if not train:
            raise ConfigurationError(f"fold {self.fold_id}: no training years")

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "test_year": self.test_year,
            "validation_years": list(self.validation_years),
            "training_years": list(self.training_years),
        }


def make_split_plans(
    years: Sequence[int],
    n_folds: int,
    n_validation: int = 2,
    test_years: Sequence[int] | None = None,
) -> list[SplitPlan]:
    """One plan per test year; the first year is never a test year because
    its early days lack a full lookback window.

    Validation years are the next ``n_validation`` years after the test
    year, wrapping around the record.
    """
    years = sorted(int(y) for y in years)
    if test_years is None:
        candidates = years[1:]
        if n_folds < 1 or n_folds > len(candidates):
            raise ConfigurationError(
                f"{len(years)} years support at most {len(candidates)} folds, got {n_folds}"
            )
        picks = np.unique(np.round(np.linspace(0, len(candidates) - 1, n_folds)).astype(int))
        test_years = [candidates[k] for k in picks]
    if len(set(test_years)) != len(test_years):
        raise ConfigurationError("test years must be distinct")
    if len(years) < n_validation + 2:
        raise ConfigurationError(f"need at least {n_validation + 2} years, got {len(years)}")
    plans = []
    for fold, test in enumerate(test_years):
        if test not in years:
            raise ConfigurationError(f"test year {test} not in record")
        others = [y for y in years if y != test]
        start = next((k for k, y in enumerate(others) if y > test), 0)
        val = tuple(sorted(others[(start + j) % len(others)] for j in range(n_validation)))
        train = tuple(y for y in others if y not in val)
        plans.append(SplitPlan(fold, int(test), val, train))
    return plans


def validation_plan(years: Sequence[int], validation_years: Sequence[int]) -> SplitPlan:
    val = tuple(sorted(int(y) for y in validation_years))
    missing = set(val) - set(years)
    if missing:
        raise ConfigurationError(f"validation years {sorted(missing)} not in record")
    return SplitPlan(-1, None, val, tuple(y for y in sorted(years) if y not in val))


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    """Z-score statistics fitted on training years only.

    Dynamic variables share one mean/std across catchments (after log1p for
    ``LOG_VARIABLES``); static attributes are z-scored across catchments;
    discharge uses per-catchment statistics of log1p(Q) for both the target
    and the discharge input.
    """

    dynamic: dict[str, tuple[float, float]]
    static: dict[str, tuple[float, float]]
    target: dict[str, tuple[float, float]]
    dropped: list[str] = field(default_factory=list)

    @classmethod
    def fit(
        cls,
        datasets: Sequence[CatchmentDataset],
        training_years: Sequence[int],
        variables: Sequence[str] | None = None,
    ) -> NormalizationStats:
        training_years = np.asarray(sorted(training_years))
        if variables is None:
            variables = _roster_sort(
                set().union(*(d.dynamic for d in datasets), *(d.static for d in datasets))
            )
        dynamic, static, target, dropped = {}, {}, {}, []
        for name in variables:
            if name == DISCHARGE:
                continue
            if all(name in d.static for d in datasets):
                vals = np.array([d.static[name] for d in datasets])
                kind = static
            else:
                parts = [
                    _transform(name, d.dynamic[name][np.isin(d.years, training_years)])
                    for d in datasets
                    if name in d.dynamic
                ]
                if not parts:
                    raise ConfigurationError(f"variable {name!r} not found in any catchment")
                vals = np.concatenate(parts)
                vals = vals[~np.isnan(vals)]
                kind = dynamic
            std = float(np.std(vals)) if vals.size else 0.0
            if not std > 0.0:
                warnings.warn(f"variable {name!r} is constant on the training split; dropped")
                dropped.append(name)
                continue
            kind[name] = (float(np.mean(vals)), std)
        for d in datasets:
            q = np.log1p(d.discharge[np.isin(d.years, training_years)])
            q = q[~np.isnan(q)]
            std = float(np.std(q)) if q.size else 0.0
            if not std > 0.0:
                raise DataIntegrityError(
                    f"{d.catchment_id}: discharge is constant or missing on the training split"
                )
            target[d.catchment_id] = (float(np.mean(q)), std)
        return cls(dynamic, static, target, dropped)

    def normalize(self, name: str, values, catchment_id: str | None = None) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if name == DISCHARGE:
            return self.normalize_target(catchment_id, values)
        if name in self.dynamic:
            mu, sd = self.dynamic[name]
            return (_transform(name, values) - mu) / sd
        if name in self.static:
            mu, sd = self.static[name]
            return (values - mu) / sd
        raise ConfigurationError(f"no normalization statistics for variable {name!r}")

    def denormalize(self, name: str, values, catchment_id: str | None = None) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if name == DISCHARGE:
            return self.denormalize_target(catchment_id, values)
        if name in self.dynamic:
            mu, sd = self.dynamic[name]
            x = values * sd + mu
            return np.expm1(x) if name in LOG_VARIABLES else x
        if name in self.static:
            mu, sd = self.static[name]
            return values * sd + mu
        raise ConfigurationError(f"no normalization statistics for variable {name!r}")

    def normalize_target(self, catchment_id, q) -> np.ndarray:
        if catchment_id not in self.target:
            raise ConfigurationError(f"no discharge statistics for catchment {catchment_id!r}")
        mu, sd = self.target[catchment_id]
        return (np.log1p(np.asarray(q, dtype=np.float64)) - mu) / sd

    def denormalize_target(self, catchment_id, z) -> np.ndarray:
        if catchment_id not in self.target:
            raise ConfigurationError(f"no discharge statistics for catchment {catchment_id!r}")
        mu, sd = self.target[catchment_id]
        return np.expm1(np.asarray(z, dtype=np.float64) * sd + mu)

    def to_dict(self) -> dict:
        return {
            "dynamic": {k: list(v) for k, v in sorted(self.dynamic.items())},
            "static": {k: list(v) for k, v in sorted(self.static.items())},
            "target": {k: list(v) for k, v in sorted(self.target.items())},
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> NormalizationStats:
        return cls(
            {k: tuple(v) for k, v in doc["dynamic"].items()},
            {k: tuple(v) for k, v in doc["static"].items()},
            {k: tuple(v) for k, v in doc["target"].items()},
            list(doc.get("dropped", [])),
        )


def _transform(name: str, values: np.ndarray) -> np.ndarray:
    return np.log1p(values) if name in LOG_VARIABLES else values


def feature_matrix(
    dataset: CatchmentDataset, names: Sequence[str], stats: NormalizationStats
) -> np.ndarray:
    """Normalized ``(n_days, len(names))`` inputs; statics repeat on every day."""
    n = len(dataset.dates)
    cols = []
    for name in names:
        if name in dataset.dynamic:
            cols.append(stats.normalize(name, dataset.dynamic[name], dataset.catchment_id))
        elif name in dataset.static:
            cols.append(np.full(n, stats.normalize(name, dataset.static[name])))
        else:
            raise ConfigurationError(f"{dataset.catchment_id}: variable {name!r} unavailable")
    if not cols:
        return np.zeros((n, 0))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class TrainingExample:
    catchment_id: str
    forecast_date: np.datetime64
    window_dates: np.ndarray
    inputs: np.ndarray  # (W, F), normalized
    input_names: tuple[str, ...]
    target: float  # normalized
    target_physical: float


def forecast_indices(
    dataset: CatchmentDataset,
    years: Sequence[int],
    window: int,
    features: np.ndarray | None = None,
    window_years: Sequence[int] | None = None,
    months: Sequence[int] | None = None,
) -> np.ndarray:
    """Day indices usable as forecast dates.

    Index ``t`` predicts discharge on ``dates[t]`` from days ``t-window`` to
    ``t-1``. The target must be observed and fall in ``years`` (and
    ``months`` when given); with ``window_years`` every window day must fall
    in those years too. Windows containing missing inputs are skipped.
    """
    if window < 1:
        raise ConfigurationError(f"window must be positive, got {window}")
    n = len(dataset.dates)
    if window >= n:
        raise ConfigurationError(
            f"{dataset.catchment_id}: window {window} exceeds the {n}-day record"
        )
    yrs = dataset.years
    ok = np.isin(yrs, np.asarray(list(years))) & ~np.isnan(dataset.discharge)
    ok[:window] = False
    if months is not None:
        month = dataset.dates.astype("datetime64[M]").astype(int) % 12 + 1
        ok &= np.isin(month, np.asarray(list(months)))
    bad_day = np.zeros(n, dtype=bool)
    if window_years is not None:
        bad_day |= ~np.isin(yrs, np.asarray(list(window_years)))
    if features is not None and features.shape[1]:
        bad_day |= np.isnan(features).any(axis=1)
    if bad_day.any():
        # count bad days in the trailing window [t - window, t)
        csum = np.concatenate([[0], np.cumsum(bad_day)])
        t = np.arange(n)
        lo = np.clip(t - window, 0, None)
        ok &= (csum[t] - csum[lo]) == 0
    return np.flatnonzero(ok)


def make_example(
    dataset: CatchmentDataset,
    t: int,
    window: int,
    names: Sequence[str],
    stats: NormalizationStats,
    features: np.ndarray | None = None,
) -> TrainingExample:
    if t < window or t >= len(dataset.dates):
        raise ConfigurationError(f"forecast index {t} has no complete {window}-day window")
    if features is None:
        features = feature_matrix(dataset, names, stats)
    q = float(dataset.discharge[t])
    return TrainingExample(
        dataset.catchment_id,
        dataset.dates[t],
        dataset.dates[t - window : t],
        features[t - window : t].copy(),
        tuple(names),
        float(stats.normalize_target(dataset.catchment_id, q)),
        q,
    )


def gather_windows(features: np.ndarray, indices: np.ndarray, window: int) -> np.ndarray:
    """Time-major ``(window, len(indices), F)`` stack of trailing windows."""
    offsets = np.arange(-window, 0)
    return np.ascontiguousarray(features[indices[None, :] + offsets[:, None]])


@dataclass(frozen=True)
class Batch:
    catchment_id: str
    indices: np.ndarray


def make_batches(
    pools: Mapping[str, np.ndarray],
    batch_size: int,
    rng: np.random.Generator | int,
) -> Iterator[Batch]:
    """One epoch of catchment-homogeneous batches.

    Each batch picks a catchment uniformly among those with dates left and
    draws up to ``batch_size`` of its remaining forecast dates without
    replacement. The epoch ends when every pool is exhausted.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    remaining = {cid: rng.permutation(np.asarray(idx)) for cid, idx in sorted(pools.items())}
    cursor = {cid: 0 for cid in remaining}
    live = [cid for cid in remaining if len(remaining[cid])]
    while live:
        cid = live[int(rng.integers(len(live)))]
        start = cursor[cid]
        stop = min(start + batch_size, len(remaining[cid]))
        cursor[cid] = stop
        if stop == len(remaining[cid]):
            live.remove(cid)
        yield Batch(cid, remaining[cid][start:stop])


def training_pools(
    datasets: Sequence[CatchmentDataset],
    split: SplitPlan,
    window: int,
    features: Mapping[str, np.ndarray] | None = None,
    months: Sequence[int] | None = None,
) -> dict[str, np.ndarray]:
    pools = {}
    for d in datasets:
        feats = features.get(d.catchment_id) if features else None
        pools[d.catchment_id] = forecast_indices(
            d, split.training_years, window, feats, window_years=split.training_years, months=months
        )
    if not any(len(p) for p in pools.values()):
        raise ConfigurationError(
            f"no training examples: window {window} does not fit inside the training years"
        )
    return pools


# ---------------------------------------------------------------- flag masking


@dataclass
class FlagAugmentedInput:
    """Base inputs plus optional inputs with 0/1 availability flags, all ``(W, .)``."""

    base: np.ndarray
    optional: np.ndarray
    flags: np.ndarray
    placeholder: float = PLACEHOLDER

    def validate(self) -> None:
        if self.optional.shape != self.flags.shape or self.base.shape[0] != self.optional.shape[0]:
            raise DataIntegrityError(
                f"misaligned flag input: base {self.base.shape}, optional {self.optional.shape}, "
                f"flags {self.flags.shape}"
            )
        if not np.isin(self.flags, (0.0, 1.0)).all():
            raise DataIntegrityError("flags must be 0 or 1")
        off = self.flags == 0
        if np.any(self.optional[off] != self.placeholder):
            raise DataIntegrityError("flag is 0 but the variable does not hold the placeholder")

    def features(self) -> np.ndarray:
        return np.concatenate([self.base, self.optional, self.flags], axis=-1)


def mask_optional(
    optional: np.ndarray, probability: float, rng: np.random.Generator, placeholder=PLACEHOLDER
):
    """Per-example masking of a time-major ``(W, B, K)`` block.

    Returns masked values and flags of the same shape; a masked example has
    every optional variable replaced by the placeholder on every day.
    """
    B = optional.shape[1]
    masked = rng.random(B) < probability
    flags = np.broadcast_to(np.where(masked, 0.0, 1.0)[None, :, None], optional.shape).copy()
    values = np.where(flags == 0.0, placeholder, optional)
    return values, flags


def apply_flag_masking(
    example: TrainingExample,
    optional_vars: Sequence[str],
    mask_probability: float = 0.5,
    seed: np.random.Generator | int | None = None,
    placeholder: float = PLACEHOLDER,
) -> FlagAugmentedInput:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    names = list(example.input_names)
    missing = [v for v in optional_vars if v not in names]
    if missing:
        raise ConfigurationError(f"optional variables {missing} absent from the example")
    opt_cols = [names.index(v) for v in optional_vars]
    base_cols = [k for k in range(len(names)) if k not in opt_cols]
    values, flags = mask_optional(
        example.inputs[:, None, opt_cols], mask_probability, rng, placeholder
    )
    return FlagAugmentedInput(
        example.inputs[:, base_cols], values[:, 0, :], flags[:, 0, :], placeholder
    )


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    """Parameter ranges for the synthetic catchment generator.

    Ranges are ``[low, high]`` pairs sampled uniformly per catchment.
    """

    start_year: int = 2001
    retention_range: tuple[float, float] = (0.93, 0.97)
    area_km2_range: tuple[float, float] = (400.0, 4000.0)
    elevation_m_range: tuple[float, float] = (300.0, 2800.0)
    slope_deg_range: tuple[float, float] = (5.0, 40.0)
    mean_temperature_k_range: tuple[float, float] = (272.0, 284.0)
    temperature_amplitude_k: float = 10.0
    wet_day_probability: float = 0.35
    precipitation_intensity_mm_range: tuple[float, float] = (4.0, 10.0)
    precipitation_seasonality: float = 0.5
    precipitation_observation_error: float = 0.25
    recharge_noise: float = 0.5
    discharge_noise: float = 0.03
    melt_factor_mm_per_k: float = 3.0
    evaporation_mm_day: float = 1.2
    evaporation_amplitude: float = 0.8
    evaporation_storage_share: float = 0.01
    upstream_fraction: float = 0.5
    upstream_scale_range: tuple[float, float] = (0.3, 0.8)
    upstream_noise: float = 0.05

    def validate(self) -> None:
        for name, value in vars(self).items():
            if name.endswith("_range"):
                lo, hi = value
                if lo > hi:
                    raise ConfigurationError(f"{name}: low {lo} exceeds high {hi}")
        lo, hi = self.retention_range
        if not (0.0 <= lo and hi < 1.0):
            raise ConfigurationError("retention_range must lie in [0, 1)")
        for name in ("wet_day_probability", "upstream_fraction", "evaporation_storage_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        for name in (
            "precipitation_observation_error",
            "recharge_noise",
            "discharge_noise",
            "upstream_noise",
            "melt_factor_mm_per_k",
            "evaporation_mm_day",
        ):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.discharge_noise >= 1.0 or self.recharge_noise > 1.0:
            raise ConfigurationError("discharge_noise must be below 1 and recharge_noise at most 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> SynthConfig:
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown synthetic config keys: {unknown}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self).items()}


def synthesize_catchments(
    n_catchments: int, n_years: int, seed: int, config: SynthConfig | None = None
) -> list[CatchmentDataset]:
    """Generate snow-and-reservoir catchments with daily drivers and discharge.

    Per day: temperature and radiation follow a seasonal sinusoid with AR(1)
    anomalies; precipitation is intermittent with seasonal intensity and is
    observed with multiplicative error; sub-freezing precipitation builds a
    snow store that melts by a degree-day rule; rain and melt recharge a
    linear reservoir ``S <- a S + recharge - evaporation`` (recharge keeps a
    random, unobserved share of rain and melt) whose outflow
    ``(1 - a) S`` is reported as discharge in m3/s with multiplicative noise.
    """
    config = config or SynthConfig()
    config.validate()
    if n_years < 6:
        raise ConfigurationError(f"need at least 6 years of data, got {n_years}")
    if n_catchments < 1:
        raise ConfigurationError("need at least one catchment")
    root = np.random.SeedSequence(seed)
    start = np.datetime64(f"{config.start_year}-01-01")
    end = np.datetime64(f"{config.start_year + n_years}-01-01")
    dates = np.arange(start, end, dtype="datetime64[D]")
    n_up = int(round(config.upstream_fraction * n_catchments))
    out = []
    for k, child in enumerate(root.spawn(n_catchments)):
        rng = np.random.default_rng(child)
        out.append(_synthesize_one(f"C{k:03d}", dates, rng, config, with_upstream=k < n_up))
    return out


def _synthesize_one(cid, dates, rng, cfg: SynthConfig, with_upstream: bool) -> CatchmentDataset:
    n = len(dates)

    def u(bounds):
        return float(rng.uniform(*bounds))

    a = u(cfg.retention_range)
    area = u(cfg.area_km2_range)
    elevation = u(cfg.elevation_m_range)
    slope = u(cfg.slope_deg_range)
    t_mean = u(cfg.mean_temperature_k_range)
    intensity = u(cfg.precipitation_intensity_mm_range)
    up_scale = u(cfg.upstream_scale_range)
    # mm/day of reservoir outflow -> m3/s
    mm_to_m3s = area * 1e3 / 86400.0

    phase = 2.0 * np.pi * (np.arange(n) % 365.25) / 365.25
    season = np.sin(phase - 1.8)  # peaks mid-July
    anomaly = np.zeros(n)
    shocks = rng.normal(0.0, 2.0, n)
    for t in range(1, n):
        anomaly[t] = 0.8 * anomaly[t - 1] + shocks[t]
    temperature = t_mean + cfg.temperature_amplitude_k * season + anomaly

    wet = rng.random(n) < cfg.wet_day_probability * (1.0 - 0.5 * cfg.precipitation_seasonality * season)
    amount = rng.exponential(intensity * (1.0 - cfg.precipitation_seasonality * 0.8 * season))
    precip = np.where(wet, amount, 0.0)
    precip_obs = precip * np.exp(
        rng.normal(-0.5 * cfg.precipitation_observation_error**2, cfg.precipitation_observation_error, n)
    )
    # unobserved share of rain and melt that reaches the reservoir
    recharge_factor = rng.uniform(1.0 - cfg.recharge_noise, 1.0, n)
    pet = np.clip(cfg.evaporation_mm_day + cfg.evaporation_amplitude * season, 0.0, None)

    swe = np.zeros(n)
    storage = np.zeros(n)
    evap = np.zeros(n)
    soil = np.zeros(n)
    snow, s = 0.0, 20.0 * intensity
    wetness = 0.0
    for t in range(n):
        storage[t] = s
        freezing = temperature[t] < 273.15
        rain = 0.0 if freezing else precip[t]
        snow += precip[t] if freezing else 0.0
        melt = min(snow, cfg.melt_factor_mm_per_k * max(temperature[t] - 273.15, 0.0))
        snow -= melt
        swe[t] = snow
        inflow = (rain + melt) * recharge_factor[t]
        # evaporation draws on fresh inflow first and only a small share of storage
        e = min(pet[t], inflow + cfg.evaporation_storage_share * a * s)
        evap[t] = e
        s = max(a * s + inflow - e, 0.0)
        wetness = 0.8 * wetness + 0.2 * (rain + melt)
        soil[t] = wetness
    outflow_mm = (1.0 - a) * storage
    noise = np.clip(rng.normal(0.0, cfg.discharge_noise, n), -0.5, 0.5)
    discharge = outflow_mm * mm_to_m3s * (1.0 + noise)

    solar = 1.4e7 + 0.5e7 * season + rng.normal(0.0, 1e6, n)
    thermal = -6.7e6 + 1.5e6 * season + rng.normal(0.0, 5e5, n)
    dynamic = {
        "precipitation_mm_day": precip_obs,
        "evaporation_mm_day": evap,
        "temperature_2m_k": temperature,
        "snow_depth_water_equivalent_m": swe / 1000.0,
        "soil_water_volume_m3": 0.1 + 0.3 * (1.0 - np.exp(-soil / 5.0)) + rng.normal(0.0, 0.01, n),
        "wind_u_10m_m_s": rng.normal(0.7, 1.5, n),
        "wind_v_10m_m_s": rng.normal(0.4, 1.2, n),
        "surface_net_solar_radiation_j_m2": solar,
        "surface_net_thermal_radiation_j_m2": thermal,
        DISCHARGE: discharge,
    }
    if with_upstream:
        lead = np.concatenate([discharge[1:], discharge[-1:]])
        up_noise = rng.normal(0.0, cfg.upstream_noise, n)
        dynamic[UPSTREAM] = np.clip(up_scale * lead * (1.0 + up_noise), 0.0, None)
    static = {
        "gauge_elevation_m": elevation,
        "area_km2": area,
        "average_slope_deg": slope,
        "mean_annual_temperature_k": t_mean,
        "reservoir_retention": a,
        "reservoir_outflow_m3_s_per_mm": (1.0 - a) * mm_to_m3s,
    }
    return CatchmentDataset(cid, dates, dynamic, static)
