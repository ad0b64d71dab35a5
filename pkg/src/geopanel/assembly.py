"""Feature pipeline: merges all feature families into the FeatureTable,
applies correlation-based selection with redundancy pruning, and enforces
the causality contract at the table level.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import DistanceMatrix, FeatureTable, Frequency, Panel, StationSet
from .regime import RegimeConfig, regime_feature_columns
from .spatial import SpatialConfig, default_sigma, kernel_weights, spatial_feature_columns
from .temporal import TemporalFeatureConfig, cyclic_unit, temporal_feature_columns


@dataclass(frozen=True)
class SelectionConfig:
    min_target_corr: float = 0.05
    redundancy_corr: float = 0.95
    max_features: int = 60
    always_keep: tuple[str, ...] = ("lag_*", "sin_*", "cos_*")
    method: str = "pearson"  # "spearman" available, non-default

    def __post_init__(self):
        if not 0 <= self.min_target_corr < 1:
            raise ConfigError("min_target_corr must be in [0, 1)")
        if not 0 < self.redundancy_corr <= 1:
            raise ConfigError("redundancy_corr must be in (0, 1]")
        if self.min_target_corr >= self.redundancy_corr:
            raise ConfigError("min_target_corr must be below redundancy_corr")
        if self.max_features < 1:
            raise ConfigError("max_features must be positive")
        if self.method not in ("pearson", "spearman"):
            raise ConfigError(f"unknown correlation method '{self.method}'")


@dataclass(frozen=True)
class DroppedFeature:
    name: str
    reason: str  # low_target_corr | redundant_with:<name> | overflow


@dataclass(frozen=True)
class SelectionReport:
    kept: tuple[str, ...]
    dropped: tuple[DroppedFeature, ...]
    target_corrs: dict[str, float]

    def to_json_obj(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped": [{"name": d.name, "reason": d.reason} for d in self.dropped],
            "target_corrs": {k: self.target_corrs[k] for k in sorted(self.target_corrs)},
        }


class FeaturePipeline:
    """Computes the full per-station feature column set for a panel.

    inject_leak deliberately replaces the first rolling mean with a centered
    (future-using) version; it exists so the causality audit's mutation test
    has a real leak to catch.
    """

    def __init__(
        self,
        stations: StationSet,
        distances: DistanceMatrix,
        frequency: Frequency,
        temporal: TemporalFeatureConfig,
        regime: RegimeConfig,
        spatial: SpatialConfig,
        inject_leak: bool = False,
    ):
        if len(stations) < 2:
            raise ConfigError("spatial features need at least 2 stations")
        self.stations = stations
        self.distances = distances
        self.frequency = frequency
        self.temporal = temporal
        self.regime = regime
        self.spatial = spatial
        self.inject_leak = inject_leak
        sigma = spatial.sigma if spatial.sigma is not None else default_sigma(distances)
        self.sigma = float(sigma)
        self.weights = kernel_weights(distances, self.sigma, spatial.kernel)
        self._schema: Optional[tuple[str, ...]] = None

    def station_columns(
        self, values: np.ndarray, timestamps: Sequence[datetime], station_index: int
    ) -> dict[str, np.ndarray]:
        """All feature columns for one station; NaN marks warm-up rows."""
        series = values[:, station_index]
        cols = temporal_feature_columns(series, timestamps, self.frequency, self.temporal)
        cols.update(regime_feature_columns(series, self.regime))
        cols.update(
            spatial_feature_columns(
                values,
                self.stations.ids,
                self.frequency,
                self.distances,
                self.weights,
                station_index,
                self.spatial,
                self.temporal.epsilon,
            )
        )
        n = len(series)
        cols["time_idx"] = np.arange(n, dtype=np.float64)
        unit_name = {
            Frequency.HOURLY: "cal_hour",
            Frequency.DAILY: "cal_dow",
            Frequency.MONTHLY: "cal_month",
        }[self.frequency]
        cols[unit_name] = np.array(
            [float(cyclic_unit(ts, self.frequency)) for ts in timestamps]
        )
        if self.inject_leak:
            w = self.temporal.windows[0]
            cols[f"rollmean_{w}"] = _centered_mean(series, w)
        schema = tuple(cols.keys())
        if self._schema is None:
            self._schema = schema
        elif schema != self._schema:
            raise DataError("inconsistent feature schema across stations")
        return cols

    def feature_names(self) -> tuple[str, ...]:
        if self._schema is None:
            raise DataError("feature schema not known before first computation")
        return self._schema


def _centered_mean(x: np.ndarray, window: int) -> np.ndarray:
    # Deliberately leaky: uses values after t.
    n = len(x)
    out = np.full(n, np.nan)
    half = window // 2
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        if t >= window - 1:
            out[t] = x[lo:hi].mean()
    return out


def _station_sorted_indices(stations: StationSet) -> list[int]:
    return sorted(range(len(stations)), key=lambda j: stations.ids[j])


def assemble(
    pipeline: FeaturePipeline,
    panel: Panel,
    target_horizon: int,
    include_one_hot: bool = True,
    station_subset: Optional[Sequence[str]] = None,
) -> FeatureTable:
    """Build the training table: one row per (station, t) where every
    feature is defined and x(t + horizon) exists as the target.

    Rows are ordered by station id then time; station one-hot columns are
    appended unless disabled (per-station mode).
    """
    if target_horizon < 1:
        raise ConfigError("target horizon must be >= 1")
    if not panel.is_complete():
        raise DataError("panel has missing cells; impute before assembling features")
    values = panel.values
    n_t = panel.n_times
    order = _station_sorted_indices(pipeline.stations)
    if station_subset is not None:
        wanted = set(station_subset)
        order = [j for j in order if pipeline.stations.ids[j] in wanted]
    one_hot_ids = [pipeline.stations.ids[j] for j in _station_sorted_indices(pipeline.stations)]

    blocks = []
    row_stations: list[str] = []
    row_times: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    schema: Optional[tuple[str, ...]] = None
    for j in order:
        cols = pipeline.station_columns(values, panel.timestamps, j)
        schema = tuple(cols.keys())
        mat = np.column_stack([cols[name] for name in schema])
        defined = ~np.isnan(mat).any(axis=1)
        defined[n_t - target_horizon :] = False  # target must exist
        t_idx = np.nonzero(defined)[0]
        if t_idx.size == 0:
            continue
        block = mat[t_idx]
        if include_one_hot:
            hot = np.zeros((len(t_idx), len(one_hot_ids)))
            hot[:, one_hot_ids.index(pipeline.stations.ids[j])] = 1.0
            block = np.hstack([block, hot])
        blocks.append(block)
        row_stations.extend([pipeline.stations.ids[j]] * len(t_idx))
        row_times.append(t_idx)
        targets.append(values[t_idx + target_horizon, j])

    if not blocks:
        raise DataError("no feature rows remain after the warm-up drop")
    full_schema = schema + tuple(f"station_{sid}" for sid in one_hot_ids) if include_one_hot else schema
    return FeatureTable(
        schema=full_schema,
        row_stations=tuple(row_stations),
        row_times=np.concatenate(row_times),
        x=np.vstack(blocks),
        y=np.concatenate(targets),
    )


def frontier_rows(
    pipeline: FeaturePipeline,
    values: np.ndarray,
    timestamps: Sequence[datetime],
    include_one_hot: bool = True,
    station_subset: Optional[Sequence[str]] = None,
) -> FeatureTable:
    """Feature rows for every station at the latest time index (no target)."""
    n_t = values.shape[0]
    t = n_t - 1
    order = _station_sorted_indices(pipeline.stations)
    if station_subset is not None:
        wanted = set(station_subset)
        order = [j for j in order if pipeline.stations.ids[j] in wanted]
    one_hot_ids = [pipeline.stations.ids[j] for j in _station_sorted_indices(pipeline.stations)]
    rows = []
    row_stations = []
    schema: Optional[tuple[str, ...]] = None
    for j in order:
        cols = pipeline.station_columns(values, timestamps, j)
        schema = tuple(cols.keys())
        row = np.array([cols[name][t] for name in schema])
        if np.isnan(row).any():
            bad = [name for name in schema if np.isnan(cols[name][t])]
            raise DataError(f"frontier features undefined (history too short): {bad[0]}")
        if include_one_hot:
            hot = np.zeros(len(one_hot_ids))
            hot[one_hot_ids.index(pipeline.stations.ids[j])] = 1.0
            row = np.concatenate([row, hot])
        rows.append(row)
        row_stations.append(pipeline.stations.ids[j])
    full_schema = schema + tuple(f"station_{sid}" for sid in one_hot_ids) if include_one_hot else schema
    return FeatureTable(
        schema=full_schema,
        row_stations=tuple(row_stations),
        row_times=np.full(len(rows), t, dtype=np.int64),
        x=np.vstack(rows),
        y=None,
    )


# Test instrumentation: called with the row indices selection actually reads.
_row_access_hook: Optional[Callable[[np.ndarray], None]] = None


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (for the Spearman option)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _abs_pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    va = float((da**2).mean())
    vb = float((db**2).mean())
    if va == 0.0 or vb == 0.0:
        return 0.0
    return abs(float((da * db).mean()) / np.sqrt(va * vb))


def select_features(
    table: FeatureTable,
    config: SelectionConfig,
    train_mask: Optional[np.ndarray] = None,
) -> tuple[FeatureTable, SelectionReport]:
    """Correlation-based selection with redundancy pruning.

    Three phases over training rows only: (i) drop features weakly
    correlated with the target, (ii) scan the rest in descending |r| and
    drop any feature too correlated with one already kept, (iii) cap the
    non-always-keep survivors at max_features. always_keep globs bypass
    (i) and (iii) but not (ii).
    """
    if table.y is None:
        raise DataError("selection requires a table with a target column")
    if train_mask is None:
        train_mask = np.ones(table.n_rows, dtype=bool)
    train_idx = np.nonzero(np.asarray(train_mask, dtype=bool))[0]
    if train_idx.size < 10:
        raise DataError("selection requires at least 10 training rows")
    if _row_access_hook is not None:
        _row_access_hook(train_idx)

    x = table.x[train_idx]
    y = table.y[train_idx]
    if config.method == "spearman":
        x = np.column_stack([_ranks(x[:, i]) for i in range(x.shape[1])])
        y = _ranks(y)

    names = list(table.schema)
    corrs = {name: _abs_pearson(x[:, i], y) for i, name in enumerate(names)}
    protected = {
        name
        for name in names
        if any(fnmatch.fnmatchcase(name, pat) for pat in config.always_keep)
    }

    dropped: list[DroppedFeature] = []
    survivors = []
    for name in names:
        if name not in protected and corrs[name] < config.min_target_corr:
            dropped.append(DroppedFeature(name, "low_target_corr"))
        else:
            survivors.append(name)

    scan = sorted(survivors, key=lambda n: (-corrs[n], n))
    col = {name: i for i, name in enumerate(table.schema)}
    kept: list[str] = []
    pair_cache: dict[tuple[str, str], float] = {}

    def pair_corr(a: str, b: str) -> float:
        key = (a, b)
        if key not in pair_cache:
            pair_cache[key] = _abs_pearson(x[:, col[a]], x[:, col[b]])
        return pair_cache[key]

    for name in scan:
        blocker = next((k for k in kept if pair_corr(name, k) > config.redundancy_corr), None)
        if blocker is not None:
            dropped.append(DroppedFeature(name, f"redundant_with:{blocker}"))
        else:
            kept.append(name)

    unprotected_kept = [n for n in kept if n not in protected]
    if len(unprotected_kept) > config.max_features:
        overflow = set(unprotected_kept[config.max_features :])
        for name in kept:
            if name in overflow:
                dropped.append(DroppedFeature(name, "overflow"))
        kept = [n for n in kept if n not in overflow]

    report = SelectionReport(kept=tuple(kept), dropped=tuple(dropped), target_corrs=corrs)
    return table.select_columns(kept), report


@dataclass(frozen=True)
class AuditViolation:
    station_id: str
    feature: str
    t: int
    full_value: float
    truncated_value: float


@dataclass(frozen=True)
class AuditReport:
    probes: int
    violations: tuple[AuditViolation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def causality_audit(
    pipeline: FeaturePipeline, panel: Panel, probes: int, seed: int
) -> AuditReport:
    """Recompute random (station, t, feature) probes on the truncated panel
    and require bit-exact agreement with the full-panel value."""
    if probes < 1:
        raise ConfigError("probes must be >= 1")
    if not panel.is_complete():
        raise DataError("audit requires a complete (imputed) panel")
    rng = np.random.default_rng(seed)
    full = {
        j: pipeline.station_columns(panel.values, panel.timestamps, j)
        for j in range(panel.n_stations)
    }
    schema = list(next(iter(full.values())).keys())
    violations: list[AuditViolation] = []
    truncated_cache: dict[tuple[int, int], dict[str, np.ndarray]] = {}
    for _ in range(probes):
        j = int(rng.integers(panel.n_stations))
        feature = schema[int(rng.integers(len(schema)))]
        defined = np.nonzero(~np.isnan(full[j][feature]))[0]
        if defined.size == 0:
            continue
        t = int(defined[int(rng.integers(defined.size))])
        key = (j, t)
        if key not in truncated_cache:
            sub = panel.truncate(t)
            truncated_cache[key] = pipeline.station_columns(sub.values, sub.timestamps, j)
        full_v = float(full[j][feature][t])
        trunc_v = float(truncated_cache[key][feature][t])
        same = (full_v == trunc_v) or (np.isnan(full_v) and np.isnan(trunc_v))
        if not same:
            violations.append(
                AuditViolation(panel.station_ids[j], feature, t, full_v, trunc_v)
            )
    return AuditReport(probes=probes, violations=tuple(violations))
