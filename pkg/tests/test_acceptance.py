"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.
"""

import math
import sys
import time
from datetime import datetime

import numpy as np

import oracles
from geopanel.assembly import (
    FeaturePipeline,
    SelectionConfig,
    causality_audit,
    select_features,
)
from geopanel.cli import main
from geopanel.evaluation import (
    MetricRefusal,
    SplitMode,
    SplitSpec,
    backtest,
    kge,
    mae,
    mape,
    mse,
    rmse,
)
from geopanel.forecasting import BackendSpec, PipelineSettings
from geopanel.ingest import IngestConfig, Imputation, compute_distances, impute, serialize_panel
from geopanel.model import FeatureTable, Frequency, Panel
from geopanel.regime import RegimeConfig
from geopanel.spatial import SpatialConfig
from geopanel.temporal import TemporalFeatureConfig, cyclic_unit
from synth_data import bench_panel, bench_stations, make_grid, random_panel


def _report(name: str, t0: float, limit: float, ok: bool = True) -> None:
    elapsed = time.perf_counter() - t0
    status = "PASS" if ok and elapsed < limit else "FAIL"
    print(f"ACCEPTANCE {status} [{name}] {elapsed:.2f}s (limit {limit:.0f}s)", file=sys.stderr)
    assert ok, name
    assert elapsed < limit, f"{name} exceeded {limit}s ({elapsed:.2f}s)"


def test_metric_oracle_suite():
    """MSE/RMSE/MAE/MAPE/KGE vs brute force on 1000 pairs; identities."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    rel = lambda a, b: abs(a - b) / max(1.0, abs(b))
    for _ in range(1000):
        n = int(rng.integers(2, 501))
        y = rng.uniform(0.5, 20.0, n)
        p = y + rng.standard_normal(n) * rng.uniform(0.01, 3.0)
        assert rel(mse(y, p), oracles.o_mse(y, p)) < 1e-10
        assert rel(rmse(y, p), oracles.o_rmse(y, p)) < 1e-10
        assert rel(mae(y, p), oracles.o_mae(y, p)) < 1e-10
        assert rel(mape(y, p), oracles.o_mape(y, p)) < 1e-10
        try:
            got = kge(y, p)
            want_kge, want_r, want_beta, want_gamma = oracles.o_kge(list(y), list(p))
            assert rel(got.kge, want_kge) < 1e-10
            assert rel(got.r, want_r) < 1e-10
            assert rel(got.beta, want_beta) < 1e-10
            assert rel(got.gamma, want_gamma) < 1e-10
        except MetricRefusal:
            pass
        assert mae(y, p) <= rmse(y, p) * (1.0 + 1e-12)
    for _ in range(50):
        n = int(rng.integers(3, 60))
        y = rng.uniform(1.0, 9.0, n)
        assert abs(kge(y, y.copy()).kge - 1.0) <= 1e-12
        assert abs(kge(y, 2.0 * y).kge - 0.0) <= 1e-12
    _report("metric-oracle-suite", t0, 5.0)


def _reference_station_columns(values, timestamps, frequency, stations, distances, target, cfg):
    """Full feature catalog recomputed with the naive oracles."""
    eps = cfg.epsilon
    x = list(values[:, target])
    n = len(x)
    cols: dict[str, list] = {}
    for k in cfg.lags:
        cols[f"lag_{k}"] = oracles.o_lag(x, k)
    for w in cfg.windows:
        roll = oracles.o_rolling(x, w)
        cols[f"rollmean_{w}"] = roll["mean"]
        cols[f"rollstd_{w}"] = roll["std"]
        cols[f"rollmin_{w}"] = roll["min"]
        cols[f"rollmax_{w}"] = roll["max"]
        cols[f"cv_{w}"] = oracles.o_cv(x, w, eps)
        cols[f"iqr_{w}"] = oracles.o_iqr(x, w)
        cs, cr = oracles.o_cumulative(x, w, eps)
        cols[f"cumsum_{w}"] = cs
        cols[f"cumratio_{w}"] = cr
        if w >= cfg.trend_degree + 2:
            ts_, tf_ = oracles.o_trend(x, w, cfg.trend_degree)
            cols[f"trend_slope_{w}"] = ts_
            cols[f"trend_fit_{w}"] = tf_
        z, tdir, rp = oracles.o_window_dynamics(x, w, eps)
        cols[f"zscore_{w}"] = z
        cols[f"trend_dir_{w}"] = tdir
        cols[f"relpos_{w}"] = rp
    d1, d2 = oracles.o_diff(x)
    cols["diff_1"] = d1
    cols["diff_2"] = d2
    from geopanel.temporal import format_period

    for p in cfg.seasonal_periods:
        sin_ref, cos_ref = oracles.o_seasonal(n, p)
        cols[f"sin_{format_period(p)}"] = sin_ref
        cols[f"cos_{format_period(p)}"] = cos_ref
    units = [cyclic_unit(t, frequency) for t in timestamps]
    cm, cstd, ca = oracles.o_cyclic(x, units, eps)
    cols["cyc_mean"] = cm
    cols["cyc_std"] = cstd
    cols["cyc_anom"] = ca
    pw = max(cfg.windows)
    p_is, p_steps = oracles.o_peaks(x, pw, cfg.peak_percentile)
    cols["is_peak"] = p_is
    cols["steps_since_peak"] = p_steps

    regime = RegimeConfig()
    cols["var_ratio"] = oracles.o_variance_ratio(x, regime.short_window, regime.long_window, regime.epsilon)
    st = oracles.o_stage_stats(x, regime.epsilon)
    cols["stage1_mean"] = st["m1"]
    cols["stage2_mean"] = st["m2"]
    cols["stage3_mean"] = st["m3"]
    cols["stage_change_12"] = st["c12"]
    cols["stage_change_23"] = st["c23"]
    cols["stage_id"] = st["sid"]

    # spatial family (kernel weights recomputed with math.exp)
    sp = SpatialConfig()
    n_s = values.shape[1]
    iu = np.triu_indices(n_s, k=1)
    sigma = float(np.median(distances.d[iu]))
    w_row = [math.exp(-distances.d[target, j] / sigma) for j in range(n_s)]
    columns = [values[:, j] for j in range(n_s)]
    cols["dwavg"] = oracles.o_dwavg(columns, w_row, target)
    ids = stations.ids
    others = sorted((j for j in range(n_s) if j != target), key=lambda j: (distances.d[target, j], ids[j]))
    for r, j in enumerate(others[: sp.k_nearest], start=1):
        cols[f"nn{r}_val"] = list(values[:, j])
        cols[f"nn{r}_wval"] = [w_row[j] * v for v in values[:, j]]
    gw = sp.gradient_window
    own_roll = oracles.o_rolling(x, gw)["mean"]
    nn1_roll = oracles.o_rolling(list(values[:, others[0]]), gw)["mean"]
    id_sorted = sorted((j for j in range(n_s) if j != target), key=lambda j: ids[j])
    neighbor_rolls = [oracles.o_rolling(list(values[:, j]), gw)["mean"] for j in id_sorted]
    cols["grad_nn1"] = [
        None if a is None else a - b for a, b in zip(own_roll, nn1_roll)
    ]
    cols["grad_all"] = [
        None if a is None else a - oracles.pmean([nr[t] for nr in neighbor_rolls])
        for t, a in enumerate(own_roll)
    ]
    if frequency is Frequency.HOURLY:
        m, s, dev = oracles.o_regional(columns, target, eps)
        cols["region_mean"] = m
        cols["region_std"] = s
        cols["sync_dev"] = dev
    else:
        order = sorted(range(n_s), key=lambda j: ids[j])
        regional = [oracles.pmean([values[t, j] for j in order]) for t in range(n)]
        loo = [j for j in order if j != target]
        loo_mean = [oracles.pmean([values[t, j] for j in loo]) for t in range(n)]
        for w in sp.cross_windows:
            roll = oracles.o_rolling(regional, w)
            cols[f"xmean_{w}"] = roll["mean"]
            cols[f"xstd_{w}"] = roll["std"]
            cols[f"xcorr_{w}"] = oracles.o_xcorr(x, loo_mean, w)
    cols["time_idx"] = [float(t) for t in range(n)]
    unit_name = {
        Frequency.HOURLY: "cal_hour",
        Frequency.DAILY: "cal_dow",
        Frequency.MONTHLY: "cal_month",
    }[frequency]
    cols[unit_name] = [float(u) for u in units]
    return cols


def test_feature_oracle_suite():
    """Every feature family vs naive references on 200 random series."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(31337)
    frequencies = [Frequency.MONTHLY, Frequency.DAILY, Frequency.HOURLY]
    starts = {
        Frequency.MONTHLY: datetime(2000, 1, 1),
        Frequency.DAILY: datetime(2021, 3, 1),
        Frequency.HOURLY: datetime(2020, 4, 1),
    }
    series_checked = 0
    trial = 0
    while series_checked < 200:
        frequency = frequencies[trial % 3]
        trial += 1
        n = int(rng.integers(45, 65))
        n_s = int(rng.integers(3, 6))
        stations, _ = random_panel(seed=int(rng.integers(1 << 30)), n_stations=n_s)
        values = rng.uniform(3.0, 8.0, (1, n_s)) + rng.standard_normal((n, n_s)) * rng.uniform(0.2, 0.8)
        timestamps = make_grid(starts[frequency], n, frequency)
        distances = compute_distances(stations)
        cfg = TemporalFeatureConfig.for_frequency(frequency)
        pipeline = FeaturePipeline(
            stations, distances, frequency, cfg, RegimeConfig(), SpatialConfig()
        )
        # exponential distance-kernel weights against math.exp
        for i in range(n_s):
            for j in range(n_s):
                want = math.exp(-distances.d[i, j] / pipeline.sigma)
                assert abs(pipeline.weights.w[i, j] - want) <= 1e-12
        for target in range(n_s):
            got = pipeline.station_columns(values, timestamps, target)
            ref = _reference_station_columns(
                values, timestamps, frequency, stations, distances, target, cfg
            )
            assert set(got) == set(ref), sorted(set(got) ^ set(ref))
            for name, ref_col in ref.items():
                got_col = got[name]
                for gv, rv in zip(got_col, ref_col):
                    if rv is None:
                        assert np.isnan(gv), name
                    else:
                        assert abs(gv - rv) <= 1e-12, (name, gv, rv)
            series_checked += 1
    _report("feature-oracle-suite", t0, 30.0)


def test_causality_audit_acceptance():
    """1000 probes, zero mismatches; centered-window mutant detected."""
    t0 = time.perf_counter()
    stations = bench_stations()
    distances = compute_distances(stations)
    panel = bench_panel(7, n_steps=400)
    cfg = TemporalFeatureConfig.for_frequency(Frequency.MONTHLY)
    clean = FeaturePipeline(stations, distances, Frequency.MONTHLY, cfg, RegimeConfig(), SpatialConfig())
    report = causality_audit(clean, panel, probes=1000, seed=11)
    assert report.probes == 1000
    assert report.ok, report.violations[:3]
    leaky = FeaturePipeline(
        stations, distances, Frequency.MONTHLY, cfg, RegimeConfig(), SpatialConfig(), inject_leak=True
    )
    mutant = causality_audit(leaky, panel, probes=1000, seed=11)
    assert not mutant.ok
    _report("causality-audit", t0, 60.0)


def test_imputation_exactness():
    """Linear recovers affine interior deletions; KNN recovers shared signal."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(555)
    for _ in range(100):
        n = int(rng.integers(12, 80))
        slope = float(rng.uniform(-4, 4))
        intercept = float(rng.uniform(-10, 10))
        truth = slope * np.arange(n, dtype=float) + intercept
        mask = np.ones((n, 2), dtype=bool)
        k = int(rng.integers(1, max(2, n // 2)))
        holes = rng.choice(np.arange(1, n - 1), size=k, replace=False)
        mask[holes, 0] = False
        panel = Panel(
            timestamps=make_grid(datetime(2020, 1, 1), n, Frequency.DAILY),
            frequency=Frequency.DAILY,
            station_ids=("A", "B"),
            values=np.column_stack([truth, np.zeros(n)]),
            mask=mask,
        )
        full, _ = impute(panel, IngestConfig(frequency=Frequency.DAILY))
        assert np.all(np.abs(full.values[:, 0] - truth) <= 1e-12)

    # All stations share one dyadic signal: any k-neighbor mean is exact.
    stations = bench_stations()
    distances = compute_distances(stations)
    n = 200
    signal = np.round(rng.uniform(1.0, 9.0, n) * 8.0) / 8.0
    values = np.tile(signal[:, None], (1, 5))
    mask = np.ones((n, 5), dtype=bool)
    for t in range(1, n - 1):
        drop = rng.choice(5, size=int(rng.integers(0, 3)), replace=False)
        mask[t, drop] = False
    panel = Panel(
        timestamps=make_grid(datetime(2000, 1, 1), n, Frequency.MONTHLY),
        frequency=Frequency.MONTHLY,
        station_ids=stations.ids,
        values=values,
        mask=mask,
    )
    cfg = IngestConfig(frequency=Frequency.MONTHLY, imputation=Imputation.KNN, knn_k=3)
    full, audit = impute(panel, cfg, distances)
    assert any(c.method == "knn" for c in audit)
    assert np.array_equal(full.values, values)
    _report("imputation-exactness", t0, 30.0)


def test_synthetic_spatiotemporal_benchmark():
    """Ridge pipeline beats seasonal-naive by >=10% and naive by >=25% pooled
    RMSE on every one of 5 seeds (tail holdout, H=24, 500 monthly steps)."""
    t0 = time.perf_counter()
    stations = bench_stations()
    distances = compute_distances(stations)
    settings = PipelineSettings(
        temporal=TemporalFeatureConfig.for_frequency(Frequency.MONTHLY),
        regime=RegimeConfig(),
        spatial=SpatialConfig(),
        selection=SelectionConfig(),
    )
    split = SplitSpec(mode=SplitMode.TAIL_HOLDOUT, horizon=24)
    for seed in range(42, 47):
        panel = bench_panel(seed, n_steps=500)
        pooled = {}
        for backend in ("ridge", "seasonal_naive", "naive"):
            report, _ = backtest(
                panel, stations, distances, settings, BackendSpec(id=backend), split, seed=seed
            )
            pooled[backend] = report.pooled.rmse
        vs_seasonal = 1.0 - pooled["ridge"] / pooled["seasonal_naive"]
        vs_naive = 1.0 - pooled["ridge"] / pooled["naive"]
        print(
            f"  seed {seed}: ridge {pooled['ridge']:.4f} | seasonal-naive -{vs_seasonal:.1%}"
            f" | naive -{vs_naive:.1%}",
            file=sys.stderr,
        )
        assert vs_seasonal >= 0.10, f"seed {seed}: only {vs_seasonal:.1%} vs seasonal-naive"
        assert vs_naive >= 0.25, f"seed {seed}: only {vs_naive:.1%} vs naive"
    _report("synthetic-benchmark", t0, 120.0)


def test_determinism(tmp_path):
    """Identical runs produce byte-identical metrics.json and feature CSVs."""
    t0 = time.perf_counter()
    stations = bench_stations()
    lines = ["station_id,x,y"] + [f"{s.id},{s.x!r},{s.y!r}" for s in stations.stations]
    (tmp_path / "stations.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "panel.csv").write_text(serialize_panel(bench_panel(42, n_steps=140)))
    base = [
        "--stations",
        str(tmp_path / "stations.csv"),
        "--panel",
        str(tmp_path / "panel.csv"),
        "--frequency",
        "monthly",
        "--horizon",
        "8",
        "--seed",
        "42",
    ]
    for tag in ("a", "b"):
        assert main(["run", *base, "--outdir", str(tmp_path / tag)]) == 0
        assert main(["features", *base, "--out", str(tmp_path / f"feat_{tag}.csv")]) == 0
    assert (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()
    assert (tmp_path / "feat_a.csv").read_bytes() == (tmp_path / "feat_b.csv").read_bytes()
    assert (
        tmp_path / "feat_a.pre.csv"
    ).read_bytes() == (tmp_path / "feat_b.pre.csv").read_bytes()
    _report("determinism", t0, 60.0)


def test_selection_suite():
    """Duplicated target pruned; constants dropped with r=0; stable order."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    n = 400
    y = rng.standard_normal(n) + 3.0
    cols = {
        "target_copy": y.copy(),
        "target_copy2": y.copy(),
        "const_a": np.full(n, 1.5),
        "const_b": np.zeros(n),
        "noise_1": rng.standard_normal(n),
        "useful": y + rng.standard_normal(n) * 0.5,
    }
    table = FeatureTable(
        schema=tuple(cols),
        row_stations=tuple("s" for _ in range(n)),
        row_times=np.arange(n),
        x=np.column_stack(list(cols.values())),
        y=y,
    )
    keptlists = []
    for _ in range(3):
        _, report = select_features(table, SelectionConfig())
        keptlists.append(report.kept)
        dropped = {d.name: d.reason for d in report.dropped}
        assert "target_copy" in report.kept
        assert dropped["target_copy2"] == "redundant_with:target_copy"
        assert dropped["const_a"] == "low_target_corr"
        assert dropped["const_b"] == "low_target_corr"
        assert report.target_corrs["const_a"] == 0.0
        assert report.target_corrs["const_b"] == 0.0
    assert keptlists[0] == keptlists[1] == keptlists[2]
    _report("selection-suite", t0, 10.0)
