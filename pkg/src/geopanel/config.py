"""Run configuration: JSON config file + flag overrides + defaults.

Every field is optional; the resolved snapshot written next to run outputs
makes all defaults explicit. The config digest covers the resolved pipeline
settings (paths excluded, so runs into different directories stay
comparable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .assembly import SelectionConfig
from .errors import ConfigError
from .evaluation import SplitMode, SplitSpec
from .forecasting import BackendSpec, PipelineSettings
from .ingest import Imputation, IngestConfig
from .model import Frequency, config_digest
from .regime import RegimeConfig
from .spatial import SpatialConfig
from .temporal import TemporalFeatureConfig

DEFAULT_SEED = 42


@dataclass(frozen=True)
class RunConfig:
    stations_path: Optional[Path]
    panel_path: Optional[Path]
    outdir: Path
    frequency: Frequency
    seed: int
    per_station: bool
    ingest: IngestConfig
    temporal: TemporalFeatureConfig
    regime: RegimeConfig
    spatial: SpatialConfig
    selection: SelectionConfig
    backend: BackendSpec
    split: SplitSpec

    def settings(self) -> PipelineSettings:
        return PipelineSettings(
            temporal=self.temporal,
            regime=self.regime,
            spatial=self.spatial,
            selection=self.selection,
            per_station=self.per_station,
        )


def _require_keys(section: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _section(obj: Mapping, name: str) -> dict:
    section = obj.get(name, {})
    if not isinstance(section, Mapping):
        raise ConfigError(f"config section '{name}' must be an object")
    return dict(section)


def load_config(
    config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus CLI overrides.

    Precedence: CLI flag > config file > built-in default.
    """
    obj: dict = {}
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config file must contain a JSON object")
    overrides = dict(overrides or {})

    _require_keys(
        obj,
        {
            "paths",
            "frequency",
            "seed",
            "per_station",
            "ingest",
            "temporal",
            "regime",
            "spatial",
            "selection",
            "backend",
            "split",
        },
        "config",
    )
    paths = _section(obj, "paths")
    _require_keys(paths, {"stations", "panel", "outdir"}, "paths")

    def pick(flag: str, conf_value, default):
        if overrides.get(flag) is not None:
            return overrides[flag]
        if conf_value is not None:
            return conf_value
        return default

    try:
        frequency = Frequency(pick("frequency", obj.get("frequency"), Frequency.DAILY.value))
    except ValueError:
        raise ConfigError(f"unknown frequency '{overrides.get('frequency') or obj.get('frequency')}'") from None
    seed = int(pick("seed", obj.get("seed"), DEFAULT_SEED))
    per_station = bool(pick("per_station", obj.get("per_station"), False))

    stations_path = pick("stations", paths.get("stations"), None)
    panel_path = pick("panel", paths.get("panel"), None)
    outdir = Path(pick("outdir", paths.get("outdir"), "geopanel_out"))

    ing = _section(obj, "ingest")
    _require_keys(ing, {"frequency", "imputation", "knn_k", "max_gap_for_linear"}, "ingest")
    try:
        imputation = Imputation(ing.get("imputation", Imputation.LINEAR.value))
    except ValueError:
        raise ConfigError(f"unknown imputation '{ing.get('imputation')}'") from None
    ingest_cfg = IngestConfig(
        frequency=frequency,
        imputation=imputation,
        knn_k=int(ing.get("knn_k", 3)),
        max_gap_for_linear=(
            None if ing.get("max_gap_for_linear") is None else int(ing["max_gap_for_linear"])
        ),
    )

    tmp = _section(obj, "temporal")
    _require_keys(
        tmp,
        {"lags", "windows", "epsilon", "trend_degree", "peak_percentile", "seasonal_periods"},
        "temporal",
    )
    tmp_kwargs: dict[str, Any] = {}
    if "lags" in tmp:
        tmp_kwargs["lags"] = tuple(int(v) for v in tmp["lags"])
    if "windows" in tmp:
        tmp_kwargs["windows"] = tuple(int(v) for v in tmp["windows"])
    if "epsilon" in tmp:
        tmp_kwargs["epsilon"] = float(tmp["epsilon"])
    if "trend_degree" in tmp:
        tmp_kwargs["trend_degree"] = int(tmp["trend_degree"])
    if "peak_percentile" in tmp:
        tmp_kwargs["peak_percentile"] = float(tmp["peak_percentile"])
    if "seasonal_periods" in tmp:
        tmp_kwargs["seasonal_periods"] = tuple(float(v) for v in tmp["seasonal_periods"])
    temporal_cfg = TemporalFeatureConfig.for_frequency(frequency, **tmp_kwargs)

    reg = _section(obj, "regime")
    _require_keys(reg, {"short_window", "long_window", "epsilon"}, "regime")
    regime_cfg = RegimeConfig(
        short_window=int(reg.get("short_window", 5)),
        long_window=int(reg.get("long_window", 20)),
        epsilon=float(reg.get("epsilon", temporal_cfg.epsilon)),
    )

    spa = _section(obj, "spatial")
    _require_keys(
        spa,
        {"sigma", "k_nearest", "gradient_window", "sync_window", "cross_windows", "kernel"},
        "spatial",
    )
    spatial_cfg = SpatialConfig(
        sigma=None if spa.get("sigma") is None else float(spa["sigma"]),
        k_nearest=int(spa.get("k_nearest", 2)),
        gradient_window=int(spa.get("gradient_window", 3)),
        sync_window=int(spa.get("sync_window", 6)),
        cross_windows=tuple(int(v) for v in spa.get("cross_windows", (3, 7))),
        kernel=str(spa.get("kernel", "exponential")),
    )

    sel = _section(obj, "selection")
    _require_keys(
        sel,
        {"min_target_corr", "redundancy_corr", "max_features", "always_keep", "method"},
        "selection",
    )
    selection_cfg = SelectionConfig(
        min_target_corr=float(sel.get("min_target_corr", 0.05)),
        redundancy_corr=float(sel.get("redundancy_corr", 0.95)),
        max_features=int(sel.get("max_features", 60)),
        always_keep=tuple(sel.get("always_keep", ("lag_*", "sin_*", "cos_*"))),
        method=str(sel.get("method", "pearson")),
    )

    bk = _section(obj, "backend")
    _require_keys(bk, {"id", "params"}, "backend")
    backend_id = str(pick("backend", bk.get("id"), "ridge"))
    params = dict(bk.get("params", {}))
    if overrides.get("backend") is not None and overrides["backend"] != bk.get("id"):
        params = {}  # params belong to the config's backend, not the override
    backend_spec = BackendSpec(id=backend_id, params=params)

    sp = _section(obj, "split")
    _require_keys(
        sp, {"mode", "horizon", "holdout_fraction", "n_origins", "origin_stride"}, "split"
    )
    try:
        mode = SplitMode(sp.get("mode", SplitMode.TAIL_HOLDOUT.value))
    except ValueError:
        raise ConfigError(f"unknown split mode '{sp.get('mode')}'") from None
    split_spec = SplitSpec(
        mode=mode,
        horizon=int(pick("horizon", sp.get("horizon"), 12)),
        holdout_fraction=float(sp.get("holdout_fraction", 0.2)),
        n_origins=int(sp.get("n_origins", 3)),
        origin_stride=None if sp.get("origin_stride") is None else int(sp["origin_stride"]),
    )

    return RunConfig(
        stations_path=None if stations_path is None else Path(stations_path),
        panel_path=None if panel_path is None else Path(panel_path),
        outdir=outdir,
        frequency=frequency,
        seed=seed,
        per_station=per_station,
        ingest=ingest_cfg,
        temporal=temporal_cfg,
        regime=regime_cfg,
        spatial=spatial_cfg,
        selection=selection_cfg,
        backend=backend_spec,
        split=split_spec,
    )


def resolved_config_obj(cfg: RunConfig, resolved_sigma: Optional[float] = None) -> dict:
    """Fully explicit config snapshot; sigma shows the value actually used."""
    spatial_sigma = cfg.spatial.sigma if cfg.spatial.sigma is not None else resolved_sigma
    obj = {
        "paths": {
            "stations": None if cfg.stations_path is None else str(cfg.stations_path),
            "panel": None if cfg.panel_path is None else str(cfg.panel_path),
            "outdir": str(cfg.outdir),
        },
        "frequency": cfg.frequency.value,
        "seed": cfg.seed,
        "per_station": cfg.per_station,
        "ingest": {
            "imputation": cfg.ingest.imputation.value,
            "knn_k": cfg.ingest.knn_k,
            "max_gap_for_linear": cfg.ingest.max_gap_for_linear,
        },
        "temporal": {
            "lags": list(cfg.temporal.lags),
            "windows": list(cfg.temporal.windows),
            "epsilon": cfg.temporal.epsilon,
            "trend_degree": cfg.temporal.trend_degree,
            "peak_percentile": cfg.temporal.peak_percentile,
            "seasonal_periods": list(cfg.temporal.seasonal_periods),
        },
        "regime": {
            "short_window": cfg.regime.short_window,
            "long_window": cfg.regime.long_window,
            "epsilon": cfg.regime.epsilon,
        },
        "spatial": {
            "sigma": spatial_sigma,
            "k_nearest": cfg.spatial.k_nearest,
            "gradient_window": cfg.spatial.gradient_window,
            "sync_window": cfg.spatial.sync_window,
            "cross_windows": list(cfg.spatial.cross_windows),
            "kernel": cfg.spatial.kernel,
        },
        "selection": {
            "min_target_corr": cfg.selection.min_target_corr,
            "redundancy_corr": cfg.selection.redundancy_corr,
            "max_features": cfg.selection.max_features,
            "always_keep": list(cfg.selection.always_keep),
            "method": cfg.selection.method,
        },
        "backend": {"id": cfg.backend.id, "params": dict(cfg.backend.params)},
        "split": {
            "mode": cfg.split.mode.value,
            "horizon": cfg.split.horizon,
            "holdout_fraction": cfg.split.holdout_fraction,
            "n_origins": cfg.split.n_origins,
            "origin_stride": cfg.split.origin_stride,
        },
    }
    return obj


def run_digest(cfg: RunConfig, resolved_sigma: Optional[float] = None) -> str:
    """Digest of the resolved config minus paths (location-independent)."""
    obj = resolved_config_obj(cfg, resolved_sigma)
    obj.pop("paths")
    return config_digest(obj)
