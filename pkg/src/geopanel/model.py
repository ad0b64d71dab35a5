"""Shared data model: stations, panels, distances, feature tables, reports.

All core types are immutable after construction (arrays are marked
read-only) and validate their invariants eagerly, so downstream code can
assume well-formed inputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError


class Frequency(str, Enum):
    HOURLY = "hourly"
    DAILY = "daily"
    MONTHLY = "monthly"


class CoordMode(str, Enum):
    EUCLIDEAN_METERS = "euclidean_meters"
    LONLAT_DEGREES = "lonlat_degrees"


SECONDS_PER_STEP = {Frequency.HOURLY: 3600.0, Frequency.DAILY: 86400.0}


@dataclass(frozen=True)
class Station:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class StationSet:
    stations: tuple[Station, ...]
    coord_mode: CoordMode

    def __post_init__(self):
        ids = [s.id for s in self.stations]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate station ids: {', '.join(dupes)}")
        for s in self.stations:
            if not s.id:
                raise DataError("empty station id")
            if not (math.isfinite(s.x) and math.isfinite(s.y)):
                raise DataError(f"non-finite coordinate for station {s.id}")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.stations)

    def __len__(self) -> int:
        return len(self.stations)


def _month_index(ts: datetime) -> int:
    return ts.year * 12 + (ts.month - 1)


def _check_uniform_grid(timestamps: Sequence[datetime], frequency: Frequency) -> None:
    for a, b in zip(timestamps, timestamps[1:]):
        if b <= a:
            raise DataError(f"timestamps not strictly increasing at {b.isoformat()}")
    if frequency is Frequency.MONTHLY:
        # Calendar-month grid: month index advances by one, day/time fixed.
        anchor = timestamps[0]
        for a, b in zip(timestamps, timestamps[1:]):
            if _month_index(b) - _month_index(a) != 1:
                raise DataError(f"monthly grid gap between {a.isoformat()} and {b.isoformat()}")
            if (b.day, b.hour, b.minute, b.second) != (anchor.day, anchor.hour, anchor.minute, anchor.second):
                raise DataError(f"monthly timestamp {b.isoformat()} not anchored to day {anchor.day}")
    else:
        step = SECONDS_PER_STEP[frequency]
        for a, b in zip(timestamps, timestamps[1:]):
            if (b - a).total_seconds() != step:
                raise DataError(
                    f"non-uniform {frequency.value} grid between {a.isoformat()} and {b.isoformat()}"
                )


def next_timestamp(ts: datetime, frequency: Frequency) -> datetime:
    """Advance one grid step (monthly steps preserve day-of-month)."""
    if frequency is Frequency.MONTHLY:
        m = _month_index(ts) + 1
        return ts.replace(year=m // 12, month=m % 12 + 1)
    from datetime import timedelta

    return ts + timedelta(seconds=SECONDS_PER_STEP[frequency])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Panel:
    """Time-aligned observation matrix (time x station) with missing mask."""

    timestamps: tuple[datetime, ...]
    frequency: Frequency
    station_ids: tuple[str, ...]
    values: np.ndarray  # float64 (n_times, n_stations); content at masked-out cells is ignored
    mask: np.ndarray  # bool (n_times, n_stations); True = observed

    def __post_init__(self):
        values = _readonly(np.asarray(self.values, dtype=np.float64))
        mask = _readonly(np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        n_t, n_s = values.shape
        if len(self.timestamps) != n_t:
            raise DataError("timestamp count does not match value rows")
        if len(self.station_ids) != n_s:
            raise DataError("station id count does not match value columns")
        if mask.shape != values.shape:
            raise DataError("mask shape does not match values")
        if n_t:
            _check_uniform_grid(self.timestamps, self.frequency)
        if not np.all(np.isfinite(values[mask])):
            raise DataError("observed cell with non-finite value")

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]

    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def truncate(self, t_last: int) -> "Panel":
        """Panel restricted to time indices [0..t_last] (copies, no aliasing)."""
        if not 0 <= t_last < self.n_times:
            raise DataError(f"truncation index {t_last} out of range")
        return Panel(
            timestamps=self.timestamps[: t_last + 1],
            frequency=self.frequency,
            station_ids=self.station_ids,
            values=self.values[: t_last + 1].copy(),
            mask=self.mask[: t_last + 1].copy(),
        )


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative station-to-station distances in meters."""

    d: np.ndarray
    station_ids: tuple[str, ...]

    def __post_init__(self):
        d = _readonly(np.asarray(self.d, dtype=np.float64))
        object.__setattr__(self, "d", d)
        n = len(self.station_ids)
        if d.shape != (n, n):
            raise DataError("distance matrix shape does not match stations")
        if not np.all(np.isfinite(d)):
            raise DataError("non-finite distance")
        if np.any(d < 0):
            raise DataError("negative distance")
        if not np.array_equal(d, d.T):
            raise DataError("distance matrix not symmetric")
        if np.any(np.diag(d) != 0.0):
            raise DataError("distance matrix diagonal not zero")


@dataclass(frozen=True)
class KernelWeights:
    """Distance-kernel weights in (0, 1], unit diagonal."""

    w: np.ndarray
    sigma: float
    station_ids: tuple[str, ...]

    def __post_init__(self):
        w = _readonly(np.asarray(self.w, dtype=np.float64))
        object.__setattr__(self, "w", w)
        if self.sigma <= 0:
            raise ConfigError("kernel sigma must be positive")
        if np.any(w <= 0) or np.any(w > 1):
            raise DataError("kernel weights outside (0, 1]")
        if np.any(np.diag(w) != 1.0):
            raise DataError("kernel weight diagonal not 1")
        if not np.array_equal(w, w.T):
            raise DataError("kernel weights not symmetric")


@dataclass(frozen=True)
class FeatureTable:
    """Tabular per-(station, time) feature rows with optional target column."""

    schema: tuple[str, ...]
    row_stations: tuple[str, ...]
    row_times: np.ndarray  # int64, one per row
    x: np.ndarray  # float64 (n_rows, n_features)
    y: Optional[np.ndarray] = None  # float64 (n_rows,) target, absent for frontier rows

    def __post_init__(self):
        x = _readonly(np.asarray(self.x, dtype=np.float64))
        times = _readonly(np.asarray(self.row_times, dtype=np.int64))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "row_times", times)
        if len(set(self.schema)) != len(self.schema):
            raise DataError("duplicate feature names in schema")
        if x.shape != (len(self.row_stations), len(self.schema)):
            raise DataError("feature matrix shape does not match rows/schema")
        if times.shape != (len(self.row_stations),):
            raise DataError("row_times length does not match rows")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite feature value")
        if self.y is not None:
            y = _readonly(np.asarray(self.y, dtype=np.float64))
            object.__setattr__(self, "y", y)
            if y.shape != (len(self.row_stations),):
                raise DataError("target length does not match rows")
            if not np.all(np.isfinite(y)):
                raise DataError("non-finite target value")

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    def select_columns(self, names: Sequence[str]) -> "FeatureTable":
        index = {name: i for i, name in enumerate(self.schema)}
        missing = [n for n in names if n not in index]
        if missing:
            raise DataError(f"unknown feature columns: {', '.join(missing)}")
        cols = [index[n] for n in names]
        return FeatureTable(
            schema=tuple(names),
            row_stations=self.row_stations,
            row_times=self.row_times.copy(),
            x=self.x[:, cols].copy(),
            y=None if self.y is None else self.y.copy(),
        )

    def subset_rows(self, row_mask: np.ndarray) -> "FeatureTable":
        row_mask = np.asarray(row_mask, dtype=bool)
        return FeatureTable(
            schema=self.schema,
            row_stations=tuple(s for s, keep in zip(self.row_stations, row_mask) if keep),
            row_times=self.row_times[row_mask].copy(),
            x=self.x[row_mask].copy(),
            y=None if self.y is None else self.y[row_mask].copy(),
        )

    def to_csv_text(self) -> str:
        header = ["station_id", "time_index", *self.schema]
        if self.y is not None:
            header.append("target")
        lines = [",".join(header)]
        for i in range(self.n_rows):
            cells = [self.row_stations[i], str(int(self.row_times[i]))]
            cells.extend(repr(v) for v in self.x[i])
            if self.y is not None:
                cells.append(repr(float(self.y[i])))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ForecastSet:
    """Per-station predicted trajectories over a fixed horizon."""

    horizon: int
    backend_id: str
    config_digest: str
    predictions: Mapping[str, np.ndarray]  # station id -> (horizon,) float64
    origin: int  # time index of the last history row the forecast starts after

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        preds = {}
        for sid, vec in self.predictions.items():
            v = _readonly(np.asarray(vec, dtype=np.float64))
            if v.shape != (self.horizon,):
                raise DataError(f"forecast for station {sid} does not match horizon")
            if not np.all(np.isfinite(v)):
                raise DataError(f"non-finite forecast for station {sid}")
            preds[sid] = v
        object.__setattr__(self, "predictions", preds)


REFUSAL_METRICS = ("mape", "kge")


@dataclass(frozen=True)
class StationMetrics:
    """Metric values for one station (or the pooled row).

    Metrics whose preconditions fail are None, with the reason recorded in
    `refusals` under the metric name.
    """

    n: int
    mse: float
    rmse: float
    mae: float
    mape: Optional[float] = None
    kge: Optional[float] = None
    r: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    refusals: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "refusals", dict(self.refusals))
        if self.n <= 0:
            raise DataError("metrics require at least one sample")
        if abs(self.rmse - math.sqrt(self.mse)) > 1e-12 * max(1.0, self.rmse):
            raise DataError("rmse is not sqrt(mse)")
        if self.mae > self.rmse * (1 + 1e-12) + 1e-300:
            raise DataError("mae exceeds rmse")
        if self.kge is not None and self.kge > 1 + 1e-12:
            raise DataError("kge exceeds 1")


@dataclass(frozen=True)
class OriginReport:
    origin: int
    stations: Mapping[str, StationMetrics]
    pooled: StationMetrics

    def __post_init__(self):
        object.__setattr__(self, "stations", dict(self.stations))


@dataclass(frozen=True)
class MetricReport:
    """Per-station and pooled metric suite for one backtest run."""

    horizon: int
    backend_id: str
    config_digest: str
    stations: Mapping[str, StationMetrics]
    pooled: StationMetrics
    origins: Optional[tuple[OriginReport, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "stations", dict(self.stations))


# --- canonical JSON + config digest -----------------------------------------


def _render_number(x: float) -> str:
    if not math.isfinite(x):
        raise ConfigError("non-finite number cannot be serialized")
    text = "%.17g" % x
    return text


def render_json(obj: Any, *, sort_keys: bool = False, indent: Optional[int] = None) -> str:
    """Deterministic JSON with numbers at 17 significant digits.

    Used both for emitted artifacts (byte-identical across runs) and, with
    sort_keys=True, as the canonical form behind config_digest.
    """

    def render(o: Any, depth: int) -> str:
        if o is None:
            return "null"
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, (int, float, np.integer, np.floating)):
            return _render_number(float(o))
        if isinstance(o, str):
            import json as _json

            return _json.dumps(o, ensure_ascii=False)
        if isinstance(o, Enum):
            return render(o.value, depth)
        if isinstance(o, Mapping):
            keys = list(o.keys())
            if sort_keys:
                keys = sorted(keys)
            items = [(render(str(k), depth), render(o[k], depth + 1)) for k in keys]
            return _wrap("{", "}", [f"{k}: {v}" if indent else f"{k}:{v}" for k, v in items], depth)
        if isinstance(o, (list, tuple, np.ndarray)):
            return _wrap("[", "]", [render(v, depth + 1) for v in o], depth)
        raise ConfigError(f"cannot serialize value of type {type(o).__name__}")

    def _wrap(opening: str, closing: str, items: list, depth: int) -> str:
        if not items:
            return opening + closing
        if indent is None:
            return opening + ",".join(items) + closing
        pad = " " * (indent * (depth + 1))
        end_pad = " " * (indent * depth)
        return opening + "\n" + ",\n".join(pad + it for it in items) + "\n" + end_pad + closing

    return render(obj, 0)


def config_digest(config: Any) -> str:
    """Stable 16-hex-digit digest of a structured configuration.

    Keys are sorted and numbers normalized (ints and equal floats collapse),
    so logically identical configs digest identically.
    """
    canonical = render_json(config, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
