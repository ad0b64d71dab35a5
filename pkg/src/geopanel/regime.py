"""Regime-change features: short/long variance ratio and stage statistics.

Stage statistics are recomputed causally at every row over the history so
far; splitting the full series up front would leak the future.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .temporal import DEFAULT_EPSILON


@dataclass(frozen=True)
class RegimeConfig:
    short_window: int = 5
    long_window: int = 20
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.short_window < 1 or self.long_window < 1:
            raise ConfigError("regime windows must be positive")
        if self.short_window >= self.long_window:
            raise ConfigError("short window must be smaller than long window")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def _window_variance(x: np.ndarray, window: int) -> np.ndarray:
    """Population variance over trailing windows, aligned to the series end."""
    wins = sliding_window_view(x, window)
    mean = wins.mean(axis=1)
    return ((wins - mean[:, None]) ** 2).mean(axis=1)


def variance_ratio(
    series: np.ndarray, short_window: int, long_window: int, epsilon: float
) -> dict[str, np.ndarray]:
    """Var(short trailing window) / (Var(long trailing window) + epsilon)."""
    if short_window >= long_window:
        raise ConfigError("short window must be smaller than long window")
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    col = np.full(n, np.nan)
    if n >= long_window:
        vs = _window_variance(x, short_window)
        vl = _window_variance(x, long_window)
        col[long_window - 1 :] = vs[long_window - short_window :] / (vl + epsilon)
    return {"var_ratio": col}


def stage_boundaries(n: int) -> tuple[int, int, int]:
    """Lengths of the three contiguous stages of an n-point history.

    Balanced split: lengths differ by at most one, earlier stages take the
    extra. n=7 -> (3, 2, 2).
    """
    base, extra = divmod(n, 3)
    return (base + (extra > 0), base + (extra > 1), base)


def stage_stats(series: np.ndarray, epsilon: float) -> dict[str, np.ndarray]:
    """Per-stage means and inter-stage change rates over history [0..t].

    Change rate k->k+1 is (mean_{k+1} - mean_k) / (|mean_k| + epsilon).
    stage_id is the stage containing index t, which is always the final one.
    Defined from t >= 5 (two points per stage).
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    names = (
        "stage1_mean",
        "stage2_mean",
        "stage3_mean",
        "stage_change_12",
        "stage_change_23",
        "stage_id",
    )
    cols = {name: np.full(n, np.nan) for name in names}
    csum = np.concatenate(([0.0], np.cumsum(x)))
    for t in range(5, n):
        m = t + 1
        l1, l2, l3 = stage_boundaries(m)
        m1 = (csum[l1] - csum[0]) / l1
        m2 = (csum[l1 + l2] - csum[l1]) / l2
        m3 = (csum[m] - csum[l1 + l2]) / l3
        cols["stage1_mean"][t] = m1
        cols["stage2_mean"][t] = m2
        cols["stage3_mean"][t] = m3
        cols["stage_change_12"][t] = (m2 - m1) / (abs(m1) + epsilon)
        cols["stage_change_23"][t] = (m3 - m2) / (abs(m2) + epsilon)
        cols["stage_id"][t] = 3.0
    return cols


def regime_feature_columns(series: np.ndarray, cfg: RegimeConfig) -> dict[str, np.ndarray]:
    cols = variance_ratio(series, cfg.short_window, cfg.long_window, cfg.epsilon)
    cols.update(stage_stats(series, cfg.epsilon))
    return cols
