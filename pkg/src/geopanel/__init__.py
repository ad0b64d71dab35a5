"""geopanel: multi-station geoscience time-series forecasting.

Characterizes spatiotemporal correlations as tabular features (temporal,
regime-change, spatial, and cross-station families), feeds them to a
pluggable tabular regression backend, and scores forecasts with an
MSE/RMSE/MAE/MAPE/KGE suite.
"""

from .assembly import (
    AuditReport,
    FeaturePipeline,
    SelectionConfig,
    SelectionReport,
    assemble,
    causality_audit,
    select_features,
)
from .errors import BackendError, ConfigError, DataError, GeopanelError, SchemaMismatchError
from .evaluation import (
    MetricRefusal,
    SplitMode,
    SplitSpec,
    backtest,
    emit_report,
    kge,
    mae,
    mape,
    mse,
    rmse,
    station_metrics,
)
from .forecasting import (
    BackendSpec,
    ExternalBackend,
    KnnBackend,
    NaiveBackend,
    PipelineSettings,
    RidgeBackend,
    SeasonalNaiveBackend,
    make_backend,
    recursive_forecast,
)
from .ingest import (
    Imputation,
    IngestConfig,
    compute_distances,
    impute,
    parse_panel,
    parse_stations,
    serialize_panel,
)
from .model import (
    CoordMode,
    DistanceMatrix,
    FeatureTable,
    ForecastSet,
    Frequency,
    KernelWeights,
    MetricReport,
    Panel,
    Station,
    StationMetrics,
    StationSet,
    config_digest,
)
from .regime import RegimeConfig
from .spatial import SpatialConfig, default_sigma, kernel_weights
from .temporal import TemporalFeatureConfig

__version__ = "0.1.0"
