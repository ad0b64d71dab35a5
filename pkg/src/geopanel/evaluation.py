"""Forecast verification: MSE, RMSE, MAE, MAPE, and KGE, plus holdout and
rolling-origin backtests and machine-readable report emission.

All moments are population moments. Metrics whose preconditions fail (zero
observed values for MAPE, degenerate variance or zero mean for KGE) are
refused rather than silently computed; reports render refusals as null/n-a.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, GeopanelError
from .forecasting import PipelineSettings, recursive_forecast
from .model import (
    DistanceMatrix,
    ForecastSet,
    Frequency,
    MetricReport,
    OriginReport,
    Panel,
    StationMetrics,
    StationSet,
    next_timestamp,
    render_json,
)

DEFAULT_ZERO_TOL = 1e-9


class MetricRefusal(GeopanelError):
    """A metric's preconditions do not hold for this series."""


def _check_pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DataError(f"metric inputs must be equal-length vectors, got {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise DataError("metric inputs are empty")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yhat))):
        raise DataError("metric inputs must be finite")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(((y - yhat) ** 2).mean())


def rmse(y, yhat) -> float:
    return math.sqrt(mse(y, yhat))


def mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.abs(yhat - y).mean())


def mape(y, yhat, zero_tol: float = DEFAULT_ZERO_TOL) -> float:
    """Mean absolute percentage error (percent); refuses near-zero observations."""
    y, yhat = _check_pair(y, yhat)
    if np.any(np.abs(y) <= zero_tol):
        raise MetricRefusal("MAPE undefined for this series: observed values at or near zero")
    return float(100.0 * np.abs((yhat - y) / y).mean())


@dataclass(frozen=True)
class KgeResult:
    kge: float
    r: float
    beta: float
    gamma: float


def kge(y, yhat) -> KgeResult:
    """Kling-Gupta efficiency: 1 - sqrt((r-1)^2 + (beta-1)^2 + (gamma-1)^2).

    r is the correlation between prediction and observation, beta the mean
    ratio, gamma the ratio of coefficients of variation (population moments).
    """
    y, yhat = _check_pair(y, yhat)
    if y.size < 2:
        raise MetricRefusal("KGE needs at least 2 samples")
    mu_y = float(y.mean())
    mu_p = float(yhat.mean())
    sd_y = float(np.sqrt(((y - mu_y) ** 2).mean()))
    sd_p = float(np.sqrt(((yhat - mu_p) ** 2).mean()))
    if sd_y == 0.0:
        raise MetricRefusal("KGE undefined: observed series is constant")
    if sd_p == 0.0:
        raise MetricRefusal("KGE undefined: predicted series is constant")
    if mu_y == 0.0:
        raise MetricRefusal("KGE undefined: observed mean is zero")
    if mu_p == 0.0:
        raise MetricRefusal("KGE undefined: predicted mean is zero")
    r = float(((yhat - mu_p) * (y - mu_y)).mean()) / (sd_p * sd_y)
    beta = mu_p / mu_y
    gamma = (sd_p / mu_p) / (sd_y / mu_y)
    value = 1.0 - math.sqrt((r - 1.0) ** 2 + (beta - 1.0) ** 2 + (gamma - 1.0) ** 2)
    return KgeResult(kge=value, r=r, beta=beta, gamma=gamma)


def station_metrics(y, yhat, zero_tol: float = DEFAULT_ZERO_TOL) -> StationMetrics:
    """Full metric suite with principled refusals for MAPE/KGE."""
    y, yhat = _check_pair(y, yhat)
    refusals: dict[str, str] = {}
    mape_v: Optional[float] = None
    try:
        mape_v = mape(y, yhat, zero_tol)
    except MetricRefusal as exc:
        refusals["mape"] = str(exc)
    kge_v = r_v = beta_v = gamma_v = None
    try:
        k = kge(y, yhat)
        kge_v, r_v, beta_v, gamma_v = k.kge, k.r, k.beta, k.gamma
    except MetricRefusal as exc:
        refusals["kge"] = str(exc)
    m = mse(y, yhat)
    return StationMetrics(
        n=int(y.size),
        mse=m,
        rmse=math.sqrt(m),
        mae=mae(y, yhat),
        mape=mape_v,
        kge=kge_v,
        r=r_v,
        beta=beta_v,
        gamma=gamma_v,
        refusals=refusals,
    )


class SplitMode(str, Enum):
    TAIL_HOLDOUT = "tail_holdout"
    ROLLING_ORIGIN = "rolling_origin"


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = SplitMode.TAIL_HOLDOUT
    horizon: int = 12
    holdout_fraction: float = 0.2
    n_origins: int = 3
    origin_stride: Optional[int] = None  # None = horizon

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0 < self.holdout_fraction <= 0.5:
            raise ConfigError("holdout_fraction must be in (0, 0.5]")
        if self.n_origins < 1:
            raise ConfigError("n_origins must be >= 1")
        if self.origin_stride is not None and self.origin_stride < 1:
            raise ConfigError("origin_stride must be >= 1")

    def origins(self, n_times: int, min_train: int = 30) -> list[int]:
        """Forecast origins (number of training rows per origin)."""
        h = self.horizon
        if self.mode is SplitMode.TAIL_HOLDOUT:
            test_len = max(h, int(self.holdout_fraction * n_times))
            # cap the holdout so at least min_train rows remain for training
            test_len = min(test_len, n_times - min_train)
            origin = n_times - test_len
            if test_len < h or origin < min_train:
                raise DataError(
                    f"infeasible split: horizon {h} does not fit after {min_train} training rows"
                )
            return [origin]
        stride = self.origin_stride if self.origin_stride is not None else h
        last = n_times - h
        origins = [last - (self.n_origins - 1 - i) * stride for i in range(self.n_origins)]
        if origins[0] < min_train:
            raise DataError(
                f"infeasible split: earliest origin {origins[0]} below {min_train} training rows"
            )
        return origins


# Test instrumentation: called with (origin, truncated panel) for each fit.
_backtest_hook: Optional[Callable[[int, Panel], None]] = None


def backtest(
    panel: Panel,
    stations: StationSet,
    distances: DistanceMatrix,
    settings: PipelineSettings,
    backend_source,
    split: SplitSpec,
    seed: int,
    config_digest: str = "",
    fit_info: Optional[dict] = None,
) -> tuple[MetricReport, list[ForecastSet]]:
    """Fit strictly before each origin, forecast H steps, score against truth.

    Rolling-origin aggregates pool the (observation, prediction) pairs
    across origins; with equal horizons the pooled MSE/MAE equal the
    unweighted per-origin means, and the report identities stay exact.
    """
    origins = split.origins(panel.n_times)
    h = split.horizon
    sorted_ids = sorted(stations.ids)
    col_of = {sid: stations.ids.index(sid) for sid in stations.ids}

    forecasts: list[ForecastSet] = []
    origin_reports: list[OriginReport] = []
    pairs: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {sid: [] for sid in sorted_ids}
    backend_id = ""
    for origin in origins:
        sub = panel.truncate(origin - 1)
        if _backtest_hook is not None:
            _backtest_hook(origin, sub)
        fc = recursive_forecast(
            sub, stations, distances, settings, backend_source, h, seed, config_digest,
            fit_info=fit_info,  # last origin's fit info wins
        )
        backend_id = fc.backend_id
        forecasts.append(fc)
        per_station = {}
        for sid in sorted_ids:
            truth = panel.values[origin : origin + h, col_of[sid]]
            pred = fc.predictions[sid]
            pairs[sid].append((truth, pred))
            per_station[sid] = station_metrics(truth, pred)
        pooled_y = np.concatenate([pairs[sid][-1][0] for sid in sorted_ids])
        pooled_p = np.concatenate([pairs[sid][-1][1] for sid in sorted_ids])
        origin_reports.append(
            OriginReport(origin=origin, stations=per_station, pooled=station_metrics(pooled_y, pooled_p))
        )

    station_agg = {}
    for sid in sorted_ids:
        ys = np.concatenate([y for y, _ in pairs[sid]])
        ps = np.concatenate([p for _, p in pairs[sid]])
        station_agg[sid] = station_metrics(ys, ps)
    all_y = np.concatenate([np.concatenate([y for y, _ in pairs[sid]]) for sid in sorted_ids])
    all_p = np.concatenate([np.concatenate([p for _, p in pairs[sid]]) for sid in sorted_ids])
    report = MetricReport(
        horizon=h,
        backend_id=backend_id,
        config_digest=config_digest,
        stations=station_agg,
        pooled=station_metrics(all_y, all_p),
        origins=tuple(origin_reports) if len(origins) > 1 else None,
    )
    return report, forecasts


# --- report emission ---------------------------------------------------------


def _metrics_obj(m: StationMetrics) -> dict:
    return {
        "n": m.n,
        "mse": m.mse,
        "rmse": m.rmse,
        "mae": m.mae,
        "mape": m.mape,
        "kge": m.kge,
        "r": m.r,
        "beta": m.beta,
        "gamma": m.gamma,
        "refusals": dict(sorted(m.refusals.items())),
    }


def _metrics_from_obj(obj: dict) -> StationMetrics:
    return StationMetrics(
        n=int(obj["n"]),
        mse=obj["mse"],
        rmse=obj["rmse"],
        mae=obj["mae"],
        mape=obj["mape"],
        kge=obj["kge"],
        r=obj["r"],
        beta=obj["beta"],
        gamma=obj["gamma"],
        refusals=obj.get("refusals", {}),
    )


def report_to_obj(report: MetricReport) -> dict:
    obj = {
        "horizon": report.horizon,
        "backend_id": report.backend_id,
        "config_digest": report.config_digest,
        "stations": {sid: _metrics_obj(report.stations[sid]) for sid in sorted(report.stations)},
        "pooled": _metrics_obj(report.pooled),
        "origins": None,
    }
    if report.origins is not None:
        obj["origins"] = [
            {
                "origin": o.origin,
                "stations": {sid: _metrics_obj(o.stations[sid]) for sid in sorted(o.stations)},
                "pooled": _metrics_obj(o.pooled),
            }
            for o in report.origins
        ]
    return obj


def report_from_obj(obj: dict) -> MetricReport:
    origins = None
    if obj.get("origins") is not None:
        origins = tuple(
            OriginReport(
                origin=int(o["origin"]),
                stations={sid: _metrics_from_obj(v) for sid, v in o["stations"].items()},
                pooled=_metrics_from_obj(o["pooled"]),
            )
            for o in obj["origins"]
        )
    return MetricReport(
        horizon=int(obj["horizon"]),
        backend_id=obj["backend_id"],
        config_digest=obj["config_digest"],
        stations={sid: _metrics_from_obj(v) for sid, v in obj["stations"].items()},
        pooled=_metrics_from_obj(obj["pooled"]),
        origins=origins,
    )


def _csv_cell(v: Optional[float]) -> str:
    return "n/a" if v is None else repr(float(v))


def _metrics_csv(report: MetricReport) -> str:
    header = "station,n,mse,rmse,mae,mape,kge,r,beta,gamma"
    lines = [header]
    rows = [(sid, report.stations[sid]) for sid in sorted(report.stations)]
    rows.append(("pooled", report.pooled))
    for name, m in rows:
        lines.append(
            ",".join(
                [
                    name,
                    str(m.n),
                    _csv_cell(m.mse),
                    _csv_cell(m.rmse),
                    _csv_cell(m.mae),
                    _csv_cell(m.mape),
                    _csv_cell(m.kge),
                    _csv_cell(m.r),
                    _csv_cell(m.beta),
                    _csv_cell(m.gamma),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _stamp(ts, frequency: Frequency) -> str:
    if frequency is not Frequency.HOURLY and (ts.hour, ts.minute, ts.second) == (0, 0, 0):
        return ts.date().isoformat()
    return ts.isoformat()


def _forecast_timestamps(panel: Panel, origin: int, horizon: int):
    ts = panel.timestamps[origin - 1]
    out = []
    for _ in range(horizon):
        ts = next_timestamp(ts, panel.frequency)
        out.append(ts)
    return out


def _forecast_csv(panel: Panel, fc: ForecastSet, sid: str) -> str:
    col = panel.station_ids.index(sid)
    stamps = _forecast_timestamps(panel, fc.origin + 1, fc.horizon)
    lines = ["timestamp,observed,predicted"]
    for i, ts in enumerate(stamps):
        t = fc.origin + 1 + i
        observed = ""
        if t < panel.n_times and panel.mask[t, col]:
            observed = repr(float(panel.values[t, col]))
        lines.append(f"{_stamp(ts, panel.frequency)},{observed},{repr(float(fc.predictions[sid][i]))}")
    return "\n".join(lines) + "\n"


def _plotdata_obj(panel: Panel, forecasts: Sequence[ForecastSet]) -> dict:
    stations_obj = {}
    for sid in sorted(panel.station_ids):
        col = panel.station_ids.index(sid)
        fc_list = []
        for fc in forecasts:
            stamps = _forecast_timestamps(panel, fc.origin + 1, fc.horizon)
            observed = []
            for i in range(fc.horizon):
                t = fc.origin + 1 + i
                observed.append(
                    float(panel.values[t, col]) if t < panel.n_times and panel.mask[t, col] else None
                )
            fc_list.append(
                {
                    "origin": fc.origin + 1,
                    "timestamps": [_stamp(ts, panel.frequency) for ts in stamps],
                    "predicted": [float(v) for v in fc.predictions[sid]],
                    "observed": observed,
                }
            )
        stations_obj[sid] = {
            "history": {
                "timestamps": [_stamp(ts, panel.frequency) for ts in panel.timestamps],
                "values": [
                    float(v) if ok else None
                    for v, ok in zip(panel.values[:, col], panel.mask[:, col])
                ],
            },
            "forecasts": fc_list,
        }
    return {"frequency": panel.frequency.value, "stations": stations_obj}


def _safe_name(sid: str) -> str:
    return "".join(c if (c.isalnum() or c in "-_") else "_" for c in sid)


def emit_report(
    report: MetricReport,
    forecasts: Sequence[ForecastSet],
    panel: Panel,
    outdir: Path,
) -> list[Path]:
    """Write metrics.json, metrics.csv, per-station forecast CSVs, and
    plotdata.json into outdir; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name: str, text: str) -> None:
        path = outdir / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from None
        written.append(path)

    write("metrics.json", render_json(report_to_obj(report), indent=2) + "\n")
    write("metrics.csv", _metrics_csv(report))
    single = len(forecasts) == 1
    for k, fc in enumerate(forecasts):
        for sid in sorted(fc.predictions):
            name = f"forecast_{_safe_name(sid)}.csv" if single else f"forecast_{_safe_name(sid)}_o{k}.csv"
            write(name, _forecast_csv(panel, fc, sid))
    write("plotdata.json", render_json(_plotdata_obj(panel, forecasts), indent=2) + "\n")
    return written
