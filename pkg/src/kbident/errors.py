"""Exception types shared across the package.

ConfigError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class KbidentError(Exception):
    """Base class for all package errors."""


class ConfigError(KbidentError):
    """Invalid configuration, malformed input files, or contract misuse."""


class NumericalError(KbidentError):
    """Numerical failure: divergence, non-finite values, singular matrices."""


class UnsupportedMeasurementError(ConfigError):
    """Measurement function has no declared closed-form moment propagation."""
