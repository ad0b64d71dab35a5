"""Typed error hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, backend 4,
anything else 5).
"""


class GeopanelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GeopanelError):
    """Invalid or inconsistent configuration."""


class DataError(GeopanelError):
    """Malformed input data (CSV parse failures, grid violations, ...)."""


class BackendError(GeopanelError):
    """A forecasting backend failed (bad schema, bridge failure, timeout)."""


class SchemaMismatchError(BackendError):
    """Prediction rows do not match the schema the backend was fit on."""
