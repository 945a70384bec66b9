"""Exception hierarchy for zimix."""


class ZimixError(Exception):
    """Base class for all zimix errors."""


class DataError(ZimixError):
    """Invalid input data (bad CSV, invariant violations, shape mismatches)."""


class ConfigError(ZimixError):
    """Invalid model configuration or parameter values."""


class FitError(ZimixError):
    """Model fitting failed (no start produced a finite log-likelihood, etc.)."""


class QuadratureError(ZimixError):
    """Numerical integration did not reach the requested tolerance."""
