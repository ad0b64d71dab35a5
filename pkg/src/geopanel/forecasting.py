"""Forecasting backends and the recursive multi-station driver.

Backends fit on a FeatureTable and predict rows. The recursive driver fits
once on history, then advances all stations jointly one step at a time,
feeding earlier predictions back into the feature computation.

The external backend speaks newline-delimited JSON to a child process (one
request in flight at a time); see the bridge package for the server side.
"""

from __future__ import annotations

import json
import os
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .assembly import (
    FeaturePipeline,
    SelectionConfig,
    SelectionReport,
    assemble,
    frontier_rows,
    select_features,
)
from .errors import BackendError, ConfigError, DataError, SchemaMismatchError
from .model import (
    DistanceMatrix,
    FeatureTable,
    ForecastSet,
    Frequency,
    Panel,
    StationSet,
    next_timestamp,
)
from .regime import RegimeConfig
from .spatial import SpatialConfig
from .temporal import TemporalFeatureConfig, _DEFAULT_PERIODS

BRIDGE_CMD_ENV = "GEOPANEL_BRIDGE_CMD"

BACKEND_IDS = ("ridge", "knn", "naive", "seasonal_naive", "external")

_ALLOWED_PARAMS = {
    "ridge": {"lambda"},
    "knn": {"k", "weighting"},
    "naive": set(),
    "seasonal_naive": {"period"},
    "external": {"command", "timeout"},
}


@dataclass(frozen=True)
class BackendSpec:
    id: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        if self.id not in BACKEND_IDS:
            raise ConfigError(f"unknown backend '{self.id}'")
        extra = set(self.params) - _ALLOWED_PARAMS[self.id]
        if extra:
            raise ConfigError(f"backend {self.id} does not accept params: {sorted(extra)}")
        if self.id == "ridge" and float(self.params.get("lambda", 1.0)) < 0:
            raise ConfigError("ridge lambda must be >= 0")
        if self.id == "knn":
            if int(self.params.get("k", 5)) < 1:
                raise ConfigError("knn k must be >= 1")
            weighting = self.params.get("weighting", "inverse_distance")
            if weighting not in ("uniform", "inverse_distance"):
                raise ConfigError(f"unknown knn weighting '{weighting}'")
        if self.id == "seasonal_naive" and "period" in self.params:
            if int(self.params["period"]) < 1:
                raise ConfigError("seasonal period must be >= 1")
        if self.id == "external" and "timeout" in self.params:
            if float(self.params["timeout"]) <= 0:
                raise ConfigError("external timeout must be positive")


class _SchemaCheckMixin:
    _schema: Optional[tuple[str, ...]] = None

    def _remember_schema(self, train: FeatureTable) -> None:
        self._schema = train.schema

    def _check_rows(self, rows: FeatureTable) -> None:
        if self._schema is None:
            raise BackendError("predict called before fit")
        if rows.schema != self._schema:
            missing = [n for n in self._schema if n not in rows.schema]
            extra = [n for n in rows.schema if n not in self._schema]
            detail = []
            if missing:
                detail.append(f"missing: {missing}")
            if extra:
                detail.append(f"unexpected: {extra}")
            if not detail:
                detail.append("columns reordered")
            raise SchemaMismatchError("prediction schema mismatch; " + "; ".join(detail))


def _standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = np.sqrt(((x - mu) ** 2).mean(axis=0))
    sd = np.where(sd == 0.0, 1.0, sd)  # constant features pass through centered
    return mu, sd


class RidgeBackend(_SchemaCheckMixin):
    """Closed-form ridge on z-scored features with an unpenalized intercept."""

    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise ConfigError("ridge lambda must be >= 0")
        self.lam = float(lam)
        self.backend_id = "ridge"

    def fit(self, train: FeatureTable, seed: int = 0) -> "RidgeBackend":
        if train.n_rows == 0 or train.y is None:
            raise DataError("ridge requires a nonempty training table with targets")
        self._remember_schema(train)
        x, y = train.x, train.y
        self.mu_, self.sd_ = _standardize_stats(x)
        xs = (x - self.mu_) / self.sd_
        self.ybar_ = float(y.mean())
        yc = y - self.ybar_
        if self.lam > 0:
            gram = xs.T @ xs + self.lam * np.eye(xs.shape[1])
            beta = np.linalg.solve(gram, xs.T @ yc)
        else:
            beta, *_ = np.linalg.lstsq(xs, yc, rcond=None)
        self.beta_ = beta
        # Coefficients in original feature units, for inspection.
        self.coef_ = beta / self.sd_
        self.intercept_ = self.ybar_ - float(np.dot(beta, self.mu_ / self.sd_))
        return self

    def predict(self, rows: FeatureTable) -> np.ndarray:
        self._check_rows(rows)
        xs = (rows.x - self.mu_) / self.sd_
        return xs @ self.beta_ + self.ybar_


class KnnBackend(_SchemaCheckMixin):
    """k-nearest-neighbor regressor in z-scored feature space."""

    def __init__(self, k: int = 5, weighting: str = "inverse_distance"):
        if k < 1:
            raise ConfigError("knn k must be >= 1")
        if weighting not in ("uniform", "inverse_distance"):
            raise ConfigError(f"unknown knn weighting '{weighting}'")
        self.k = int(k)
        self.weighting = weighting
        self.backend_id = "knn"

    def fit(self, train: FeatureTable, seed: int = 0) -> "KnnBackend":
        if train.n_rows == 0 or train.y is None:
            raise DataError("knn requires a nonempty training table with targets")
        self._remember_schema(train)
        self.mu_, self.sd_ = _standardize_stats(train.x)
        self.xs_ = (train.x - self.mu_) / self.sd_
        self.y_ = train.y.copy()
        return self

    def predict(self, rows: FeatureTable) -> np.ndarray:
        self._check_rows(rows)
        k = min(self.k, len(self.y_))
        out = np.empty(rows.n_rows)
        qs = (rows.x - self.mu_) / self.sd_
        for i in range(rows.n_rows):
            d = np.sqrt(((self.xs_ - qs[i]) ** 2).sum(axis=1))
            order = np.lexsort((np.arange(len(d)), d))[:k]  # ties by training row
            dk, yk = d[order], self.y_[order]
            if self.weighting == "uniform":
                out[i] = yk.mean()
            elif dk[0] == 0.0:
                out[i] = yk[dk == 0.0].mean()  # exact matches dominate
            else:
                w = 1.0 / dk
                out[i] = float((w * yk).sum() / w.sum())
        return out


class NaiveBackend(_SchemaCheckMixin):
    """Flat forecast at each station's most recent observed value."""

    def __init__(self):
        self.backend_id = "naive"

    def fit(self, train: FeatureTable, seed: int = 0) -> "NaiveBackend":
        if train.y is None:
            raise DataError("naive requires a training table with targets")
        self._remember_schema(train)
        last: dict[str, tuple[int, float]] = {}
        for sid, t, y in zip(train.row_stations, train.row_times, train.y):
            if sid not in last or t > last[sid][0]:
                last[sid] = (int(t), float(y))
        self.last_value_ = {sid: v for sid, (_, v) in last.items()}
        return self

    def predict(self, rows: FeatureTable) -> np.ndarray:
        self._check_rows(rows)
        try:
            return np.array([self.last_value_[sid] for sid in rows.row_stations])
        except KeyError as exc:
            raise BackendError(f"naive backend has no history for station {exc}") from None


class SeasonalNaiveBackend(_SchemaCheckMixin):
    """Forecast equals the value one season before the forecast time."""

    def __init__(self, period: int):
        if period < 1:
            raise ConfigError("seasonal period must be >= 1")
        self.period = int(period)
        self.backend_id = "seasonal_naive"

    def fit(self, train: FeatureTable, seed: int = 0) -> "SeasonalNaiveBackend":
        if train.y is None:
            raise DataError("seasonal_naive requires a training table with targets")
        self._remember_schema(train)
        series: dict[str, dict[int, float]] = {}
        for sid, t, y in zip(train.row_stations, train.row_times, train.y):
            series.setdefault(sid, {})[int(t) + 1] = float(y)  # target time = t + 1
        self.series_ = series
        self.t_hi_ = {sid: max(s) for sid, s in series.items()}
        self.t_lo_ = {sid: min(s) for sid, s in series.items()}
        return self

    def predict(self, rows: FeatureTable) -> np.ndarray:
        self._check_rows(rows)
        out = np.empty(rows.n_rows)
        for i, (sid, t) in enumerate(zip(rows.row_stations, rows.row_times)):
            if sid not in self.series_:
                raise BackendError(f"seasonal_naive has no history for station {sid}")
            tau = int(t) + 1 - self.period
            hi, lo = self.t_hi_[sid], self.t_lo_[sid]
            while tau > hi:
                tau -= self.period
            if tau < lo:
                tau = lo + (tau - lo) % self.period
                if tau > hi:
                    tau = hi
            out[i] = self.series_[sid][tau] if tau in self.series_[sid] else self.series_[sid][hi]
        return out


class BridgeClient:
    """Newline-delimited JSON client for an external bridge process."""

    def __init__(self, command: Union[str, Sequence[str]], timeout: float = 120.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ConfigError("external backend command is empty")
        self.timeout = float(timeout)
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"cannot launch bridge command {argv}: {exc}") from None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def request(self, op: str, payload: Optional[dict] = None) -> dict:
        self._next_id += 1
        req_id = self._next_id
        msg = {"id": req_id, "op": op}
        if payload is not None:
            msg["payload"] = payload
        try:
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise BackendError(f"bridge process closed its input: {exc}") from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.close(force=True)
            raise BackendError(f"bridge request '{op}' timed out after {self.timeout}s") from None
        if line is None:
            raise BackendError("bridge process exited before responding")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError:
            raise BackendError(f"bridge sent malformed JSON: {line!r}") from None
        if resp.get("id") != req_id:
            raise BackendError(f"bridge response id {resp.get('id')} does not match request {req_id}")
        if resp.get("status") != "ok":
            message = resp.get("payload", {}).get("message", "unknown error")
            raise BackendError(f"bridge error for '{op}': {message}")
        return resp.get("payload", {})

    def close(self, force: bool = False) -> None:
        if self._proc.poll() is None:
            try:
                if not force:
                    self._proc.stdin.write(json.dumps({"id": self._next_id + 1, "op": "shutdown"}) + "\n")
                    self._proc.stdin.flush()
                self._proc.stdin.close()
            except (BrokenPipeError, ValueError, OSError):
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class ExternalBackend(_SchemaCheckMixin):
    """Bridge-backed backend; each predict is a stateless fit_predict call."""

    def __init__(self, command: Union[str, Sequence[str], None] = None, timeout: float = 120.0):
        command = os.environ.get(BRIDGE_CMD_ENV) or command  # env var overrides config
        if not command:
            raise ConfigError(
                f"external backend needs a command (param or {BRIDGE_CMD_ENV} env var)"
            )
        self.command = command
        self.timeout = float(timeout)
        self.backend_id = "external"
        self._client: Optional[BridgeClient] = None

    def fit(self, train: FeatureTable, seed: int = 0) -> "ExternalBackend":
        if train.y is None:
            raise DataError("external backend requires a training table with targets")
        self._remember_schema(train)
        self.close()  # refitting replaces any previous child process
        self._client = BridgeClient(self.command, self.timeout)
        try:
            self.server_info_ = self._client.request("hello")
        except BackendError:
            self.close()
            raise
        self._train_x = train.x
        self._train_y = train.y
        return self

    def predict(self, rows: FeatureTable) -> np.ndarray:
        self._check_rows(rows)
        if self._client is None:
            raise BackendError("predict called before fit")
        payload = {
            "feature_names": list(self._schema),
            "train_x": self._train_x.tolist(),
            "train_y": self._train_y.tolist(),
            "test_x": rows.x.tolist(),
        }
        result = self._client.request("fit_predict", payload)
        pred = np.asarray(result.get("pred", []), dtype=np.float64)
        if pred.shape != (rows.n_rows,):
            raise BackendError(
                f"bridge returned {pred.shape[0] if pred.ndim else 0} predictions for {rows.n_rows} rows"
            )
        if not np.all(np.isfinite(pred)):
            raise BackendError("bridge returned non-finite predictions")
        return pred

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None


def make_backend(spec: BackendSpec, frequency: Frequency):
    if spec.id == "ridge":
        return RidgeBackend(lam=float(spec.params.get("lambda", 1.0)))
    if spec.id == "knn":
        return KnnBackend(
            k=int(spec.params.get("k", 5)),
            weighting=str(spec.params.get("weighting", "inverse_distance")),
        )
    if spec.id == "naive":
        return NaiveBackend()
    if spec.id == "seasonal_naive":
        default_period = int(_DEFAULT_PERIODS[frequency][0])
        return SeasonalNaiveBackend(period=int(spec.params.get("period", default_period)))
    if spec.id == "external":
        return ExternalBackend(
            command=spec.params.get("command"),
            timeout=float(spec.params.get("timeout", 120.0)),
        )
    raise ConfigError(f"unknown backend '{spec.id}'")


def fit(backend_spec: BackendSpec, train: FeatureTable, seed: int, frequency: Frequency):
    """Instantiate and fit a backend; the fitted instance is the fit state."""
    backend = make_backend(backend_spec, frequency)
    return backend.fit(train, seed)


def predict(state, rows: FeatureTable) -> np.ndarray:
    preds = state.predict(rows)
    if not np.all(np.isfinite(preds)):
        raise BackendError("backend produced non-finite predictions")
    return preds


@dataclass(frozen=True)
class PipelineSettings:
    temporal: TemporalFeatureConfig
    regime: RegimeConfig
    spatial: SpatialConfig
    selection: SelectionConfig
    per_station: bool = False


class ForecastError(BackendError):
    """Backend failure mid-horizon; carries the steps completed so far."""

    def __init__(self, message: str, completed: dict[str, list[float]]):
        super().__init__(message)
        self.completed = completed


MIN_TRAIN_ROWS = 30


@dataclass
class _FittedModel:
    backend: object
    kept: tuple[str, ...]
    selection: SelectionReport


def fit_models(
    pipeline: FeaturePipeline,
    panel: Panel,
    settings: PipelineSettings,
    backend_source,
    seed: int,
    frequency: Frequency,
) -> dict[Optional[str], _FittedModel]:
    """Fit one pooled model, or one per station in per-station mode.

    backend_source is a BackendSpec, a backend instance (pooled mode only),
    or a callable returning fresh instances.
    """

    def new_backend():
        if isinstance(backend_source, BackendSpec):
            return make_backend(backend_source, frequency)
        if callable(backend_source):
            return backend_source()
        return backend_source

    models: dict[Optional[str], _FittedModel] = {}
    if settings.per_station:
        for sid in sorted(pipeline.stations.ids):
            table = assemble(pipeline, panel, 1, include_one_hot=False, station_subset=[sid])
            if table.n_rows < MIN_TRAIN_ROWS:
                raise DataError(
                    f"station {sid} has {table.n_rows} training rows; need {MIN_TRAIN_ROWS}"
                )
            selected, report = select_features(table, settings.selection)
            backend = new_backend()
            backend.fit(selected, seed)
            models[sid] = _FittedModel(backend, report.kept, report)
    else:
        table = assemble(pipeline, panel, 1, include_one_hot=True)
        if table.n_rows < MIN_TRAIN_ROWS:
            raise DataError(f"{table.n_rows} training rows; need {MIN_TRAIN_ROWS}")
        selected, report = select_features(table, settings.selection)
        backend = new_backend()
        backend.fit(selected, seed)
        models[None] = _FittedModel(backend, report.kept, report)
    return models


def recursive_forecast(
    panel: Panel,
    stations: StationSet,
    distances: DistanceMatrix,
    settings: PipelineSettings,
    backend_source,
    horizon: int,
    seed: int,
    config_digest: str = "",
    fit_info: Optional[dict] = None,
) -> ForecastSet:
    """Fit once on history, then roll the panel forward one step at a time.

    Each step builds frontier feature rows from real history plus earlier
    predicted steps, predicts all stations jointly, and appends the
    predictions as a new panel row. The input panel is never modified. When
    fit_info is a dict it receives the selection reports of this fit.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    pipeline = FeaturePipeline(
        stations, distances, panel.frequency, settings.temporal, settings.regime, settings.spatial
    )
    models = fit_models(pipeline, panel, settings, backend_source, seed, panel.frequency)
    if fit_info is not None:
        fit_info["selection"] = {key: model.selection for key, model in models.items()}
        fit_info["sigma"] = pipeline.sigma

    sorted_ids = sorted(stations.ids)
    col_of = {sid: stations.ids.index(sid) for sid in stations.ids}
    values = panel.values.copy()
    timestamps = list(panel.timestamps)
    completed: dict[str, list[float]] = {sid: [] for sid in sorted_ids}

    try:
        for step in range(1, horizon + 1):
            try:
                new_row = np.empty(panel.n_stations)
                if settings.per_station:
                    for sid in sorted_ids:
                        model = models[sid]
                        ft = frontier_rows(
                            pipeline, values, timestamps, include_one_hot=False, station_subset=[sid]
                        )
                        pred = predict(model.backend, ft.select_columns(model.kept))
                        new_row[col_of[sid]] = pred[0]
                else:
                    model = models[None]
                    ft = frontier_rows(pipeline, values, timestamps, include_one_hot=True)
                    pred = predict(model.backend, ft.select_columns(model.kept))
                    for sid, p in zip(ft.row_stations, pred):
                        new_row[col_of[sid]] = p
            except Exception as exc:
                raise ForecastError(
                    f"backend failed at step {step}/{horizon}: {exc}", completed
                ) from exc
            for sid in sorted_ids:
                completed[sid].append(float(new_row[col_of[sid]]))
            values = np.vstack([values, new_row])
            timestamps.append(next_timestamp(timestamps[-1], panel.frequency))
    finally:
        for model in models.values():
            closer = getattr(model.backend, "close", None)
            if closer is not None:
                closer()

    backend_id = getattr(
        next(iter(models.values())).backend, "backend_id", type(backend_source).__name__
    )
    return ForecastSet(
        horizon=horizon,
        backend_id=str(backend_id),
        config_digest=config_digest,
        predictions={sid: np.array(completed[sid]) for sid in sorted_ids},
        origin=panel.n_times - 1,
    )
