"""Cross-station spatial features: kernel weights, distance-weighted
averages, nearest-station values, gradients, and frequency-dependent
cross-station dynamics.

Hourly panels get regional synchronicity columns; daily and monthly panels
get rolling cross-station statistics instead. All cross-station reductions
iterate stations in id-sorted order, making results invariant under
permutation of the station input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .model import DistanceMatrix, Frequency, KernelWeights


@dataclass(frozen=True)
class SpatialConfig:
    sigma: Optional[float] = None  # None = median off-diagonal distance
    k_nearest: int = 2
    gradient_window: int = 3
    sync_window: int = 6
    cross_windows: tuple[int, ...] = (3, 7)
    kernel: str = "exponential"  # or "gaussian", non-default

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.k_nearest < 1:
            raise ConfigError("k_nearest must be positive")
        if self.gradient_window < 2:
            raise ConfigError("gradient_window must be >= 2")
        if self.sync_window < 1:
            raise ConfigError("sync_window must be positive")
        if any(w < 2 for w in self.cross_windows):
            raise ConfigError("cross windows must be >= 2")
        if self.kernel not in ("exponential", "gaussian"):
            raise ConfigError(f"unknown kernel '{self.kernel}'")


def default_sigma(distances: DistanceMatrix) -> float:
    """Median off-diagonal distance (each pair counted once)."""
    n = distances.d.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(np.median(distances.d[iu]))


def kernel_weights(
    distances: DistanceMatrix, sigma: float, kernel: str = "exponential"
) -> KernelWeights:
    """w(d) = exp(-d/sigma); optional gaussian variant exp(-d^2/(2 sigma^2))."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if kernel == "exponential":
        w = np.exp(-distances.d / sigma)
    elif kernel == "gaussian":
        w = np.exp(-(distances.d**2) / (2.0 * sigma * sigma))
    else:
        raise ConfigError(f"unknown kernel '{kernel}'")
    return KernelWeights(w=w, sigma=float(sigma), station_ids=distances.station_ids)


def neighbor_ranking(distances: DistanceMatrix, target: int) -> list[int]:
    """Other stations by ascending distance, ties by station id."""
    ids = distances.station_ids
    others = [j for j in range(len(ids)) if j != target]
    return sorted(others, key=lambda j: (distances.d[target, j], ids[j]))


def _id_sorted_others(station_ids: Sequence[str], target: int) -> list[int]:
    others = [j for j in range(len(station_ids)) if j != target]
    return sorted(others, key=lambda j: station_ids[j])


def distance_weighted_average(
    values: np.ndarray, weights: KernelWeights, target: int
) -> dict[str, np.ndarray]:
    """Weighted neighbor average with self excluded and weights renormalized.

    Falls back to the unweighted neighbor mean when the weight mass is
    numerically zero.
    """
    others = _id_sorted_others(weights.station_ids, target)
    if not others:
        raise ConfigError("distance-weighted average needs at least one neighbor")
    w = np.array([weights.w[target, j] for j in others])
    total = w.sum()
    if total < 1e-12:
        w = np.full(len(others), 1.0 / len(others))
    else:
        w = w / total
    out = np.zeros(values.shape[0])
    for wj, j in zip(w, others):
        out = out + wj * values[:, j]
    return {"dwavg": out}


def nearest_station_features(
    values: np.ndarray,
    distances: DistanceMatrix,
    weights: KernelWeights,
    target: int,
    k: int,
) -> dict[str, np.ndarray]:
    """Raw and weight-scaled values of the k nearest stations."""
    ranking = neighbor_ranking(distances, target)
    if len(ranking) < k:
        raise ConfigError(f"need {k} neighbors, have {len(ranking)}")
    out = {}
    for r, j in enumerate(ranking[:k], start=1):
        out[f"nn{r}_val"] = values[:, j].copy()
        out[f"nn{r}_wval"] = weights.w[target, j] * values[:, j]
    return out


def _rollmean(x: np.ndarray, window: int) -> np.ndarray:
    out = np.full(len(x), np.nan)
    if len(x) >= window:
        out[window - 1 :] = sliding_window_view(x, window).mean(axis=1)
    return out


def spatial_gradient(
    values: np.ndarray, distances: DistanceMatrix, target: int, window: int
) -> dict[str, np.ndarray]:
    """Rolling-mean differences between the target and its neighbors."""
    ranking = neighbor_ranking(distances, target)
    own = _rollmean(values[:, target], window)
    nn1 = _rollmean(values[:, ranking[0]], window)
    others = _id_sorted_others(distances.station_ids, target)
    acc = np.zeros(values.shape[0])
    for j in others:
        acc = acc + _rollmean(values[:, j], window)
    return {"grad_nn1": own - nn1, "grad_all": own - acc / len(others)}


def regional_synchronicity(
    values: np.ndarray,
    station_ids: Sequence[str],
    target: int,
    sync_window: int,
    epsilon: float,
) -> dict[str, np.ndarray]:
    """Cross-sectional mean/std over all stations and the target's deviation."""
    order = sorted(range(len(station_ids)), key=lambda j: station_ids[j])
    m = values[:, order]
    mean = m.mean(axis=1)
    std = np.sqrt(((m - mean[:, None]) ** 2).mean(axis=1))
    dev = (values[:, target] - mean) / (std + epsilon)
    return {"region_mean": mean, "region_std": std, "sync_dev": dev}


def _windowed_pearson(a: np.ndarray, b: np.ndarray, window: int) -> np.ndarray:
    """Pearson correlation over trailing windows; 0 where either side is constant."""
    n = len(a)
    out = np.full(n, np.nan)
    if n < window:
        return out
    wa = sliding_window_view(a, window)
    wb = sliding_window_view(b, window)
    am = wa.mean(axis=1)
    bm = wb.mean(axis=1)
    da = wa - am[:, None]
    db = wb - bm[:, None]
    cov = (da * db).mean(axis=1)
    va = (da**2).mean(axis=1)
    vb = (db**2).mean(axis=1)
    denom = np.sqrt(va * vb)
    corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    out[window - 1 :] = corr
    return out


def cross_station_stats(
    values: np.ndarray,
    station_ids: Sequence[str],
    target: int,
    cross_windows: Sequence[int],
) -> dict[str, np.ndarray]:
    """Rolling stats of the regional mean plus correlation with the
    leave-one-out regional mean (daily/monthly panels)."""
    order = sorted(range(len(station_ids)), key=lambda j: station_ids[j])
    regional = values[:, order].mean(axis=1)
    loo_order = [j for j in order if j != target]
    loo_mean = values[:, loo_order].mean(axis=1)
    own = values[:, target]
    out: dict[str, np.ndarray] = {}
    n = values.shape[0]
    for w in cross_windows:
        xmean = np.full(n, np.nan)
        xstd = np.full(n, np.nan)
        if n >= w:
            wins = sliding_window_view(regional, w)
            mw = wins.mean(axis=1)
            xmean[w - 1 :] = mw
            xstd[w - 1 :] = np.sqrt(((wins - mw[:, None]) ** 2).mean(axis=1))
        out[f"xmean_{w}"] = xmean
        out[f"xstd_{w}"] = xstd
        out[f"xcorr_{w}"] = _windowed_pearson(own, loo_mean, w)
    return out


def spatial_feature_columns(
    values: np.ndarray,
    station_ids: Sequence[str],
    frequency: Frequency,
    distances: DistanceMatrix,
    weights: KernelWeights,
    target: int,
    cfg: SpatialConfig,
    epsilon: float,
) -> dict[str, np.ndarray]:
    """All spatial columns for one target station, frequency-gated."""
    if cfg.k_nearest >= len(station_ids):
        raise ConfigError("k_nearest must be smaller than the station count")
    cols: dict[str, np.ndarray] = {}
    cols.update(distance_weighted_average(values, weights, target))
    cols.update(nearest_station_features(values, distances, weights, target, cfg.k_nearest))
    cols.update(spatial_gradient(values, distances, target, cfg.gradient_window))
    if frequency is Frequency.HOURLY:
        cols.update(
            regional_synchronicity(values, station_ids, target, cfg.sync_window, epsilon)
        )
    else:
        cols.update(cross_station_stats(values, station_ids, target, cfg.cross_windows))
    return cols
