"""Command-line entry point: ingest -> featurize -> forecast -> evaluate.

Subcommands:
    run       full pipeline, writes all artifacts into the output directory
    features  dump the assembled feature tables (pre- and post-selection)
    audit     run the causality audit and exit nonzero on violations
    report    re-render metrics from saved forecast CSVs

Exit codes: 0 success, 2 config error, 3 data error, 4 backend error,
5 internal error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation
from .assembly import FeaturePipeline, assemble, causality_audit, select_features
from .config import RunConfig, load_config, resolved_config_obj, run_digest
from .errors import BackendError, ConfigError, DataError, GeopanelError
from .evaluation import backtest, emit_report, station_metrics
from .ingest import compute_distances, impute, parse_panel, parse_stations
from .model import MetricReport, render_json
from .spatial import default_sigma

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_INTERNAL = 5


def _read_file(path: Optional[Path], what: str) -> str:
    if path is None:
        raise ConfigError(f"no {what} file configured (use --{what} or the config file)")
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc}") from None


class _RunLog:
    def __init__(self):
        self.lines: list[str] = []
        self.t0 = time.time()

    def add(self, message: str) -> None:
        self.lines.append(f"[{time.time() - self.t0:8.3f}s] {message}")

    def write(self, path: Path) -> None:
        path.write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def _load_inputs(cfg: RunConfig, log: _RunLog):
    stations = parse_stations(_read_file(cfg.stations_path, "stations"))
    log.add(f"parsed {len(stations)} stations ({stations.coord_mode.value})")
    panel = parse_panel(_read_file(cfg.panel_path, "panel"), cfg.frequency, stations)
    missing = int((~panel.mask).sum())
    log.add(f"parsed panel: {panel.n_times} x {panel.n_stations}, {missing} missing cells")
    distances = compute_distances(stations)
    full, audit = impute(panel, cfg.ingest, distances)
    by_method: dict[str, int] = {}
    for cell in audit:
        by_method[cell.method] = by_method.get(cell.method, 0) + 1
    log.add(f"imputed {len(audit)} cells ({by_method or 'nothing to fill'})")
    return stations, panel, full, distances


def _selection_report_obj(fit_info: dict) -> dict:
    reports = fit_info.get("selection", {})
    if list(reports) == [None]:
        return {"pooled": reports[None].to_json_obj()}
    return {"stations": {sid: rep.to_json_obj() for sid, rep in sorted(reports.items())}}


def cmd_run(cfg: RunConfig) -> int:
    log = _RunLog()
    outdir = Path(cfg.outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {outdir}: {exc}") from None
    stations, _, panel, distances = _load_inputs(cfg, log)
    sigma = cfg.spatial.sigma if cfg.spatial.sigma is not None else default_sigma(distances)
    digest = run_digest(cfg, resolved_sigma=sigma)
    log.add(f"config digest {digest}")

    fit_info: dict = {}
    report, forecasts = backtest(
        panel,
        stations,
        distances,
        cfg.settings(),
        cfg.backend,
        cfg.split,
        seed=cfg.seed,
        config_digest=digest,
        fit_info=fit_info,
    )
    log.add(
        f"backtest done: backend={report.backend_id} horizon={report.horizon} "
        f"pooled rmse={report.pooled.rmse:.6g}"
    )
    written = emit_report(report, forecasts, panel, outdir)
    (outdir / "selection_report.json").write_text(
        render_json(_selection_report_obj(fit_info), indent=2) + "\n", encoding="utf-8"
    )
    snapshot = resolved_config_obj(cfg, resolved_sigma=sigma)
    snapshot["digest"] = digest
    (outdir / "resolved_config.json").write_text(
        render_json(snapshot, indent=2) + "\n", encoding="utf-8"
    )
    log.add(f"wrote {len(written) + 2} artifact files to {outdir}")
    log.write(outdir / "run.log")
    return EXIT_OK


def cmd_features(cfg: RunConfig, out: Path) -> int:
    log = _RunLog()
    stations, _, panel, distances = _load_inputs(cfg, log)
    pipeline = FeaturePipeline(
        stations, distances, cfg.frequency, cfg.temporal, cfg.regime, cfg.spatial
    )
    table = assemble(pipeline, panel, 1)  # one-step-ahead table, as the driver trains on
    selected, _report = select_features(table, cfg.selection)
    out = Path(out)
    pre_path = out.with_name(out.stem + ".pre" + out.suffix) if out.suffix else Path(str(out) + ".pre")
    out.parent.mkdir(parents=True, exist_ok=True)
    pre_path.write_text(table.to_csv_text(), encoding="utf-8")
    out.write_text(selected.to_csv_text(), encoding="utf-8")
    print(f"wrote {pre_path} ({len(table.schema)} features) and {out} ({len(selected.schema)} kept)")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, probes: int, inject_leak: bool) -> int:
    log = _RunLog()
    stations, _, panel, distances = _load_inputs(cfg, log)
    pipeline = FeaturePipeline(
        stations,
        distances,
        cfg.frequency,
        cfg.temporal,
        cfg.regime,
        cfg.spatial,
        inject_leak=inject_leak,
    )
    report = causality_audit(pipeline, panel, probes=probes, seed=cfg.seed)
    if report.ok:
        print(f"causality audit: {report.probes} probes, 0 violations")
        return EXIT_OK
    print(f"causality audit FAILED: {len(report.violations)} violation(s)", file=sys.stderr)
    for v in report.violations[:20]:
        print(
            f"  station={v.station_id} feature={v.feature} t={v.t} "
            f"full={v.full_value!r} truncated={v.truncated_value!r}",
            file=sys.stderr,
        )
    return 1


def _read_forecast_csv(path: Path):
    pairs: list[tuple[float, float]] = []
    preds: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["timestamp", "observed", "predicted"]:
            raise DataError(f"{path} is not a forecast CSV")
        for row in reader:
            pred = float(row["predicted"])
            preds.append(pred)
            if row["observed"] != "":
                pairs.append((float(row["observed"]), pred))
    return pairs, preds


def cmd_report(outdir: Path) -> int:
    """Recompute metrics.json/metrics.csv from saved forecast CSVs."""
    outdir = Path(outdir)
    files = sorted(outdir.glob("forecast_*.csv"))
    if not files:
        raise DataError(f"no forecast_*.csv files found in {outdir}")
    per_station: dict[str, list[tuple[float, float]]] = {}
    horizon = 0
    for path in files:
        sid = path.stem[len("forecast_") :]
        parts = sid.rsplit("_o", 1)
        if len(parts) == 2 and parts[1].isdigit():  # rolling-origin suffix
            sid = parts[0]
        pairs, preds = _read_forecast_csv(path)
        per_station.setdefault(sid, []).extend(pairs)
        horizon = max(horizon, len(preds))
    scored = {sid: p for sid, p in per_station.items() if p}
    if not scored:
        raise DataError("forecast files contain no observed values to score against")
    backend_id = ""
    digest = ""
    resolved = outdir / "resolved_config.json"
    if resolved.exists():
        import json

        snapshot = json.loads(resolved.read_text(encoding="utf-8"))
        backend_id = snapshot.get("backend", {}).get("id", "")
        digest = snapshot.get("digest", "")
    stations_metrics = {}
    for sid in sorted(scored):
        y = np.array([a for a, _ in scored[sid]])
        p = np.array([b for _, b in scored[sid]])
        stations_metrics[sid] = station_metrics(y, p)
    all_y = np.concatenate([[a for a, _ in scored[sid]] for sid in sorted(scored)])
    all_p = np.concatenate([[b for _, b in scored[sid]] for sid in sorted(scored)])
    report = MetricReport(
        horizon=horizon,
        backend_id=backend_id,
        config_digest=digest,
        stations=stations_metrics,
        pooled=station_metrics(all_y, all_p),
    )
    (outdir / "metrics.json").write_text(
        render_json(evaluation.report_to_obj(report), indent=2) + "\n", encoding="utf-8"
    )
    (outdir / "metrics.csv").write_text(evaluation._metrics_csv(report), encoding="utf-8")
    print(f"re-rendered metrics for {len(stations_metrics)} stations from {len(files)} files")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geopanel",
        description="Multi-station geoscience time-series forecasting with spatiotemporal features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--stations", type=Path, help="stations CSV path")
        p.add_argument("--panel", type=Path, help="panel CSV path")
        p.add_argument("--frequency", choices=["hourly", "daily", "monthly"])
        p.add_argument("--backend", choices=["ridge", "knn", "naive", "seasonal_naive", "external"])
        p.add_argument("--horizon", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--outdir", type=Path)
        p.add_argument("--per-station", action="store_true", default=None, dest="per_station")

    p_run = sub.add_parser("run", help="execute the full pipeline")
    add_common(p_run)

    p_feat = sub.add_parser("features", help="dump assembled feature tables as CSV")
    add_common(p_feat)
    p_feat.add_argument("--out", type=Path, default=Path("features.csv"))

    p_audit = sub.add_parser("audit", help="run the causality audit")
    add_common(p_audit)
    p_audit.add_argument("--probes", type=int, default=1000)
    p_audit.add_argument("--inject-leak", action="store_true", help=argparse.SUPPRESS)

    p_rep = sub.add_parser("report", help="re-render metrics from saved forecasts")
    p_rep.add_argument("--outdir", type=Path, required=True)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.outdir)
        overrides = {
            "stations": args.stations,
            "panel": args.panel,
            "frequency": args.frequency,
            "backend": args.backend,
            "horizon": args.horizon,
            "seed": args.seed,
            "outdir": args.outdir,
            "per_station": args.per_station,
        }
        cfg = load_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "features":
            return cmd_features(cfg, args.out)
        if args.command == "audit":
            if args.probes < 1:
                raise ConfigError("--probes must be >= 1")
            return cmd_audit(cfg, args.probes, args.inject_leak)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except GeopanelError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
