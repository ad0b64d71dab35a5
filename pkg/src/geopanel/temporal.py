"""Per-station temporal features: lags, rolling stats, variability,
cumulative, seasonal encodings, trend fits, cyclic-group stats, peaks,
and window dynamics.

Every feature is strictly causal: the value at index t depends only on the
series up to and including t. Undefined warm-up positions carry NaN and are
dropped later during table assembly. Window reductions are computed per
trailing slice (never via running accumulators across rows), which keeps
values bit-identical when the series is truncated at t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .model import Frequency

DEFAULT_EPSILON = 1e-8

_DEFAULT_LAGS = {
    Frequency.HOURLY: (1, 2, 3, 7),
    Frequency.DAILY: (1, 2, 3, 7),
    Frequency.MONTHLY: (1, 2, 3, 12),
}
_DEFAULT_WINDOWS = {
    Frequency.HOURLY: (6, 12, 24),
    Frequency.DAILY: (3, 7, 14),
    Frequency.MONTHLY: (3, 6, 12),
}
_DEFAULT_PERIODS = {
    Frequency.HOURLY: (24.0, 168.0),
    Frequency.DAILY: (7.0, 365.25),
    Frequency.MONTHLY: (12.0,),
}


@dataclass(frozen=True)
class TemporalFeatureConfig:
    lags: tuple[int, ...]
    windows: tuple[int, ...]
    epsilon: float = DEFAULT_EPSILON
    trend_degree: int = 1
    peak_percentile: float = 70.0
    seasonal_periods: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if any(k < 1 for k in self.lags):
            raise ConfigError("lags must be >= 1")
        if any(w < 2 for w in self.windows):
            raise ConfigError("windows must be >= 2")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.trend_degree not in (1, 2):
            raise ConfigError("trend_degree must be 1 or 2")
        if not 0 < self.peak_percentile < 100:
            raise ConfigError("peak_percentile must be in (0, 100)")
        if any(p <= 0 for p in self.seasonal_periods):
            raise ConfigError("seasonal periods must be positive")

    @classmethod
    def for_frequency(cls, frequency: Frequency, **overrides) -> "TemporalFeatureConfig":
        base = dict(
            lags=_DEFAULT_LAGS[frequency],
            windows=_DEFAULT_WINDOWS[frequency],
            seasonal_periods=_DEFAULT_PERIODS[frequency],
        )
        base.update(overrides)
        return cls(**base)


def format_period(p: float) -> str:
    return str(int(p)) if float(p) == int(p) else repr(float(p))


def lag_features(
    series: np.ndarray, lags: Sequence[int], strict: bool = True
) -> dict[str, np.ndarray]:
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if strict and n <= max(lags):
        raise DataError(f"series length {n} too short for lag {max(lags)}")
    out = {}
    for k in lags:
        col = np.full(n, np.nan)
        if k < n:
            col[k:] = x[:-k]
        out[f"lag_{k}"] = col
    return out


def rolling_stats(series: np.ndarray, window: int) -> dict[str, np.ndarray]:
    """Trailing-window mean/std/min/max; population std (divide by w)."""
    if window < 2:
        raise ConfigError("rolling window must be >= 2")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    out = {
        f"rollmean_{window}": np.full(n, np.nan),
        f"rollstd_{window}": np.full(n, np.nan),
        f"rollmin_{window}": np.full(n, np.nan),
        f"rollmax_{window}": np.full(n, np.nan),
    }
    if n < window:
        return out
    wins = sliding_window_view(x, window)
    mean = wins.mean(axis=1)
    std = np.sqrt(((wins - mean[:, None]) ** 2).mean(axis=1))
    out[f"rollmean_{window}"][window - 1 :] = mean
    out[f"rollstd_{window}"][window - 1 :] = std
    out[f"rollmin_{window}"][window - 1 :] = wins.min(axis=1)
    out[f"rollmax_{window}"][window - 1 :] = wins.max(axis=1)
    return out


def diff_features(series: np.ndarray) -> dict[str, np.ndarray]:
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    d1 = np.full(n, np.nan)
    d2 = np.full(n, np.nan)
    if n >= 2:
        d1[1:] = x[1:] - x[:-1]
    if n >= 3:
        d2[2:] = d1[2:] - d1[1:-1]
    return {"diff_1": d1, "diff_2": d2}


def coeff_variation(series: np.ndarray, window: int, epsilon: float) -> dict[str, np.ndarray]:
    """Windowed coefficient of variation sigma/(mu + epsilon)."""
    stats = rolling_stats(series, window)
    cv = stats[f"rollstd_{window}"] / (stats[f"rollmean_{window}"] + epsilon)
    return {f"cv_{window}": cv}


def iqr_features(series: np.ndarray, window: int) -> dict[str, np.ndarray]:
    """Q3 - Q1 over the trailing window, linear-interpolated percentiles."""
    if window < 2:
        raise ConfigError("iqr window must be >= 2")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    col = np.full(n, np.nan)
    if n >= window:
        wins = sliding_window_view(x, window)
        q1 = np.percentile(wins, 25, axis=1)
        q3 = np.percentile(wins, 75, axis=1)
        col[window - 1 :] = q3 - q1
    return {f"iqr_{window}": col}


def cumulative_features(series: np.ndarray, window: int, epsilon: float) -> dict[str, np.ndarray]:
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    csum = np.full(n, np.nan)
    cratio = np.full(n, np.nan)
    if n >= window:
        wins = sliding_window_view(x, window)
        s = wins.sum(axis=1)
        csum[window - 1 :] = s
        cratio[window - 1 :] = x[window - 1 :] / (s + epsilon)
    return {f"cumsum_{window}": csum, f"cumratio_{window}": cratio}


def seasonal_encoding(n: int, period: float) -> dict[str, np.ndarray]:
    """sin/cos of the integer grid index against the given period."""
    if period <= 0:
        raise ConfigError("seasonal period must be positive")
    t = np.arange(n, dtype=np.float64)
    angle = 2.0 * np.pi * t / period
    name = format_period(period)
    return {f"sin_{name}": np.sin(angle), f"cos_{name}": np.cos(angle)}


def trend_features(series: np.ndarray, window: int, degree: int) -> dict[str, np.ndarray]:
    """Least-squares polynomial over the trailing window against local index.

    Emits the leading coefficient and the fitted value at the window's last
    position. Requires window >= degree + 2.
    """
    if degree not in (1, 2):
        raise ConfigError("trend degree must be 1 or 2")
    if window < degree + 2:
        raise ConfigError(f"trend window {window} too small for degree {degree}")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    slope = np.full(n, np.nan)
    fit = np.full(n, np.nan)
    if n < window:
        return {f"trend_slope_{window}": slope, f"trend_fit_{window}": fit}
    wins = sliding_window_view(x, window)
    i = np.arange(window, dtype=np.float64)
    last = float(window - 1)
    if degree == 1:
        ibar = i.mean()
        denom = ((i - ibar) ** 2).sum()
        sx = wins.sum(axis=1)
        six = (wins * i).sum(axis=1)
        b1 = (six - ibar * sx) / denom
        b0 = sx / window - b1 * ibar
        slope[window - 1 :] = b1
        fit[window - 1 :] = b0 + b1 * last
    else:
        v = np.vander(i, 3, increasing=True)  # columns 1, i, i^2
        g = np.linalg.inv(v.T @ v)
        s0 = wins.sum(axis=1)
        s1 = (wins * i).sum(axis=1)
        s2 = (wins * i**2).sum(axis=1)
        c0 = g[0, 0] * s0 + g[0, 1] * s1 + g[0, 2] * s2
        c1 = g[1, 0] * s0 + g[1, 1] * s1 + g[1, 2] * s2
        c2 = g[2, 0] * s0 + g[2, 1] * s1 + g[2, 2] * s2
        slope[window - 1 :] = c2
        fit[window - 1 :] = c0 + c1 * last + c2 * last * last
    return {f"trend_slope_{window}": slope, f"trend_fit_{window}": fit}


def cyclic_unit(ts: datetime, frequency: Frequency) -> int:
    """Hour-of-day, day-of-week, or month-of-year depending on frequency."""
    if frequency is Frequency.HOURLY:
        return ts.hour
    if frequency is Frequency.DAILY:
        return ts.weekday()
    return ts.month


def cyclic_group_stats(
    series: np.ndarray,
    timestamps: Sequence[datetime],
    frequency: Frequency,
    epsilon: float,
) -> dict[str, np.ndarray]:
    """Expanding, causal mean/std/anomaly by cyclic unit.

    Stats at t use only prior occurrences of the same unit; rows with fewer
    than 2 prior members get cyc_mean = x_t and cyc_anom = 0 (cold start).
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    mean_col = np.empty(n)
    std_col = np.empty(n)
    anom_col = np.empty(n)
    groups: dict[int, list[float]] = {}
    for t in range(n):
        unit = cyclic_unit(timestamps[t], frequency)
        prior = groups.setdefault(unit, [])
        if len(prior) >= 2:
            arr = np.array(prior)
            m = arr.mean()
            s = np.sqrt(((arr - m) ** 2).mean())
            mean_col[t] = m
            std_col[t] = s
            anom_col[t] = (x[t] - m) / (s + epsilon)
        else:
            mean_col[t] = x[t]
            std_col[t] = 0.0
            anom_col[t] = 0.0
        prior.append(float(x[t]))
    return {"cyc_mean": mean_col, "cyc_std": std_col, "cyc_anom": anom_col}


def peak_features(
    series: np.ndarray, window: int, percentile: float
) -> dict[str, np.ndarray]:
    """Flags local maxima above the window percentile; tracks recency.

    Index j is a peak when x[j-1] < x[j] >= x[j+1] and x[j] strictly exceeds
    the percentile of the trailing window ending at j (truncated at the
    series start). A peak at j is decidable only once x[j+1] is known, so at
    row t the newest candidate is j = t-1. steps_since_peak is capped at the
    window size, which is also the no-peak-yet default.
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    is_peak = np.full(n, np.nan)
    steps = np.full(n, np.nan)
    last_peak = -1
    for t in range(2, n):
        j = t - 1
        peak = bool(x[j - 1] < x[j] and x[j] >= x[t])
        if peak:
            lo = max(0, j - window + 1)
            peak = bool(x[j] > np.percentile(x[lo : j + 1], percentile))
        if peak:
            last_peak = j
        is_peak[t] = 1.0 if peak else 0.0
        steps[t] = float(window if last_peak < 0 else min(t - last_peak, window))
    return {"is_peak": is_peak, "steps_since_peak": steps}


def window_dynamics(series: np.ndarray, window: int, epsilon: float) -> dict[str, np.ndarray]:
    """Mean-reversion z-score, rolling-mean direction, and relative position."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    stats = rolling_stats(series, window)
    mean = stats[f"rollmean_{window}"]
    std = stats[f"rollstd_{window}"]
    lo = stats[f"rollmin_{window}"]
    hi = stats[f"rollmax_{window}"]
    zscore = (x - mean) / (std + epsilon)
    relpos = (x - lo) / (hi - lo + epsilon)
    trend_dir = np.full(n, np.nan)
    if n >= window:
        trend_dir[window - 1] = 0.0  # previous window not yet available
    if n > window:
        trend_dir[window:] = np.sign(mean[window:] - mean[window - 1 : -1])
    return {
        f"zscore_{window}": zscore,
        f"trend_dir_{window}": trend_dir,
        f"relpos_{window}": relpos,
    }


def temporal_feature_columns(
    series: np.ndarray,
    timestamps: Sequence[datetime],
    frequency: Frequency,
    cfg: TemporalFeatureConfig,
) -> dict[str, np.ndarray]:
    """All temporal columns for one station, in deterministic schema order."""
    n = len(series)
    cols: dict[str, np.ndarray] = {}
    cols.update(lag_features(series, cfg.lags, strict=False))
    for w in cfg.windows:
        cols.update(rolling_stats(series, w))
        cols.update(coeff_variation(series, w, cfg.epsilon))
        cols.update(iqr_features(series, w))
        cols.update(cumulative_features(series, w, cfg.epsilon))
        if w >= cfg.trend_degree + 2:
            cols.update(trend_features(series, w, cfg.trend_degree))
        cols.update(window_dynamics(series, w, cfg.epsilon))
    cols.update(diff_features(series))
    for p in cfg.seasonal_periods:
        cols.update(seasonal_encoding(n, p))
    cols.update(cyclic_group_stats(series, timestamps, frequency, cfg.epsilon))
    cols.update(peak_features(series, max(cfg.windows), cfg.peak_percentile))
    return cols
