"""CSV ingestion, grid alignment, imputation, and the distance matrix.

Stations CSV: header ``station_id,x,y`` (planar meters) or
``station_id,lon,lat`` (geodetic degrees). Panel CSV is wide: first column
an ISO-8601 timestamp, one column per station id, empty cell = missing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .model import (
    CoordMode,
    DistanceMatrix,
    Frequency,
    Panel,
    Station,
    StationSet,
    _month_index,
    next_timestamp,
)

EARTH_RADIUS_M = 6_371_000.0


class Imputation(str, Enum):
    LINEAR = "linear"
    KNN = "knn"
    LINEAR_THEN_KNN = "linear_then_knn"


@dataclass(frozen=True)
class IngestConfig:
    frequency: Frequency
    imputation: Imputation = Imputation.LINEAR
    knn_k: int = 3
    max_gap_for_linear: Optional[int] = None  # None = unlimited

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("knn_k must be positive")
        if self.max_gap_for_linear is not None and self.max_gap_for_linear < 1:
            raise ConfigError("max_gap_for_linear must be positive")


@dataclass(frozen=True)
class ImputedCell:
    time_index: int
    station_id: str
    method: str


def parse_stations(csv_text: str) -> StationSet:
    """Parse the stations CSV; the header decides the coordinate mode."""
    reader = csv.reader(io.StringIO(csv_text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise DataError("empty stations file")
    header = [c.strip() for c in rows[0]]
    if header == ["station_id", "x", "y"]:
        mode = CoordMode.EUCLIDEAN_METERS
    elif header == ["station_id", "lon", "lat"]:
        mode = CoordMode.LONLAT_DEGREES
    else:
        raise DataError(
            "stations header must be 'station_id,x,y' or 'station_id,lon,lat', got "
            + ",".join(header)
        )
    stations: list[Station] = []
    seen: set[str] = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"expected 3 columns at row {line_no}")
        sid = row[0].strip()
        if not sid:
            raise DataError(f"empty station id at row {line_no}")
        if sid in seen:
            raise DataError(f"duplicate station id {sid} at row {line_no}")
        seen.add(sid)
        try:
            x = float(row[1])
            y = float(row[2])
        except ValueError:
            raise DataError(f"non-numeric coordinate at row {line_no}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"non-finite coordinate at row {line_no}")
        stations.append(Station(id=sid, x=x, y=y))
    if len(stations) < 2:
        raise DataError(f"need at least 2 stations, got {len(stations)}")
    return StationSet(stations=tuple(stations), coord_mode=mode)


def _parse_timestamp(text: str, line_no: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"unparseable timestamp '{text}' at row {line_no}") from None


def _grid_offset(ts: datetime, t0: datetime, frequency: Frequency) -> int:
    """Grid index of ts relative to t0, or raise if off-grid."""
    if frequency is Frequency.MONTHLY:
        if (ts.day, ts.hour, ts.minute, ts.second, ts.microsecond) != (
            t0.day,
            t0.hour,
            t0.minute,
            t0.second,
            t0.microsecond,
        ):
            raise DataError(f"timestamp {ts.isoformat()} off the monthly grid anchored at {t0.isoformat()}")
        return _month_index(ts) - _month_index(t0)
    step = 3600.0 if frequency is Frequency.HOURLY else 86400.0
    delta = (ts - t0).total_seconds()
    k = delta / step
    if k != int(k):
        raise DataError(f"timestamp {ts.isoformat()} off the {frequency.value} grid")
    return int(k)


def parse_panel(
    csv_text: str, frequency: Frequency, stations: Optional[StationSet] = None
) -> Panel:
    """Parse the wide panel CSV onto a uniform grid.

    Timestamps absent from the file become fully missing rows. When a
    StationSet is supplied, columns are checked against it and reordered to
    its station order.
    """
    reader = csv.reader(io.StringIO(csv_text))
    rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if len(rows) < 2:
        raise DataError("panel file needs a header and at least one data row")
    header = [c.strip() for c in rows[0]]
    col_ids = header[1:]
    if len(set(col_ids)) != len(col_ids):
        raise DataError("duplicate station column in panel header")
    if stations is not None:
        known = set(stations.ids)
        unknown = [c for c in col_ids if c not in known]
        if unknown:
            raise DataError(f"unknown station column {unknown[0]}")
        absent = [s for s in stations.ids if s not in col_ids]
        if absent:
            raise DataError(f"panel is missing station column {absent[0]}")

    parsed: list[tuple[datetime, list[Optional[float]]]] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"wrong column count at row {line_no}")
        ts = _parse_timestamp(row[0], line_no)
        vals: list[Optional[float]] = []
        for cell, col in zip(row[1:], col_ids):
            cell = cell.strip()
            if cell == "":
                vals.append(None)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value '{cell}' for {col} at row {line_no}") from None
            if not math.isfinite(v):
                raise DataError(f"non-finite value for {col} at row {line_no}")
            vals.append(v)
        parsed.append((ts, vals))

    parsed.sort(key=lambda item: item[0])
    t0 = parsed[0][0]
    offsets = []
    for ts, _ in parsed:
        offsets.append(_grid_offset(ts, t0, frequency))
    if len(set(offsets)) != len(offsets):
        raise DataError("duplicate timestamp in panel")

    n_t = offsets[-1] + 1
    n_s = len(col_ids)
    values = np.zeros((n_t, n_s), dtype=np.float64)
    mask = np.zeros((n_t, n_s), dtype=bool)
    for (ts, vals), k in zip(parsed, offsets):
        for j, v in enumerate(vals):
            if v is not None:
                values[k, j] = v
                mask[k, j] = True

    timestamps = [t0]
    for _ in range(n_t - 1):
        timestamps.append(next_timestamp(timestamps[-1], frequency))

    if stations is not None and col_ids != list(stations.ids):
        order = [col_ids.index(s) for s in stations.ids]
        values = values[:, order]
        mask = mask[:, order]
        col_ids = list(stations.ids)

    return Panel(
        timestamps=tuple(timestamps),
        frequency=frequency,
        station_ids=tuple(col_ids),
        values=values,
        mask=mask,
    )


def serialize_panel(panel: Panel) -> str:
    """Inverse of parse_panel; values round-trip bit-exactly via repr."""
    lines = [",".join(["timestamp", *panel.station_ids])]
    for t in range(panel.n_times):
        ts = panel.timestamps[t]
        if panel.frequency is not Frequency.HOURLY and (ts.hour, ts.minute, ts.second) == (0, 0, 0):
            stamp = ts.date().isoformat()
        else:
            stamp = ts.isoformat()
        cells = [stamp]
        for s in range(panel.n_stations):
            cells.append(repr(float(panel.values[t, s])) if panel.mask[t, s] else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _haversine(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def compute_distances(stations: StationSet) -> DistanceMatrix:
    """Planar distance for euclidean mode, haversine (R=6,371,000 m) for lon/lat."""
    n = len(stations)
    if n < 2:
        raise DataError("need at least 2 stations for distances")
    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = stations.stations[i], stations.stations[j]
            if stations.coord_mode is CoordMode.EUCLIDEAN_METERS:
                dist = math.hypot(a.x - b.x, a.y - b.y)
            else:
                dist = _haversine(a.x, a.y, b.x, b.y)
            d[i, j] = d[j, i] = dist
    return DistanceMatrix(d=d, station_ids=stations.ids)


def _neighbor_order(distances: DistanceMatrix, target: int) -> list[int]:
    """All other stations sorted by ascending distance, ties by station id."""
    ids = distances.station_ids
    others = [j for j in range(len(ids)) if j != target]
    return sorted(others, key=lambda j: (distances.d[target, j], ids[j]))


def _fill_linear(
    series: np.ndarray, obs: np.ndarray, max_gap: Optional[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation on interior gaps, flat extrapolation at the edges.

    Interior gaps longer than max_gap fall back to the nearest observed
    value. Returns (filled series, mask of cells this pass filled).
    """
    n = len(series)
    idx = np.arange(n)
    filled = series.copy()
    filled_here = np.zeros(n, dtype=bool)
    obs_idx = idx[obs]
    interp = np.interp(idx, obs_idx, series[obs])
    for t in idx[~obs]:
        prev_obs = obs_idx[obs_idx < t]
        next_obs = obs_idx[obs_idx > t]
        if prev_obs.size and next_obs.size:
            gap = next_obs[0] - prev_obs[-1] - 1
            if max_gap is not None and gap > max_gap:
                # Too wide to trust a line: take the nearest endpoint.
                lo, hi = prev_obs[-1], next_obs[0]
                nearest = lo if (t - lo) <= (hi - t) else hi
                filled[t] = series[nearest]
            else:
                filled[t] = interp[t]
        else:
            filled[t] = interp[t]  # np.interp holds edge values flat
        filled_here[t] = True
    return filled, filled_here


def impute(panel: Panel, config: IngestConfig, distances: Optional[DistanceMatrix] = None):
    """Fill missing cells; returns (complete Panel, list of ImputedCell).

    KNN fills a missing (t, s) with the mean over the k spatially nearest
    stations observed at t, falling back to linear interpolation when no
    station is observed. Observed cells are never modified.
    """
    for j, sid in enumerate(panel.station_ids):
        if int(panel.mask[:, j].sum()) < 2:
            raise DataError(f"station {sid} has fewer than 2 observed values")
    if config.imputation in (Imputation.KNN, Imputation.LINEAR_THEN_KNN):
        if distances is None:
            raise ConfigError(f"{config.imputation.value} imputation requires a distance matrix")
        if config.knn_k >= panel.n_stations:
            raise ConfigError("knn_k must be smaller than the station count")

    values = panel.values.copy()
    mask = panel.mask.copy()
    audit: list[ImputedCell] = []

    if config.imputation in (Imputation.KNN, Imputation.LINEAR_THEN_KNN):
        neighbor_orders = {j: _neighbor_order(distances, j) for j in range(panel.n_stations)}
        for j in range(panel.n_stations):
            for t in np.nonzero(~mask[:, j])[0]:
                donors = [nb for nb in neighbor_orders[j] if panel.mask[t, nb]][: config.knn_k]
                if donors:
                    values[t, j] = float(np.mean(panel.values[t, donors]))
                    mask[t, j] = True
                    audit.append(ImputedCell(int(t), panel.station_ids[j], "knn"))

    if config.imputation in (Imputation.LINEAR, Imputation.LINEAR_THEN_KNN) or not mask.all():
        for j in range(panel.n_stations):
            missing = ~mask[:, j]
            if not missing.any():
                continue
            filled, filled_here = _fill_linear(values[:, j], mask[:, j], config.max_gap_for_linear)
            values[:, j] = filled
            mask[:, j] |= filled_here
            for t in np.nonzero(filled_here)[0]:
                audit.append(ImputedCell(int(t), panel.station_ids[j], "linear"))

    audit.sort(key=lambda c: (c.time_index, c.station_id))
    out = Panel(
        timestamps=panel.timestamps,
        frequency=panel.frequency,
        station_ids=panel.station_ids,
        values=values,
        mask=mask,
    )
    assert out.is_complete()
    return out, audit
