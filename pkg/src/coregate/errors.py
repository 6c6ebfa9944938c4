"""Exception hierarchy shared across the package.

The CLI maps these onto distinct process exit codes, so raising the right
subclass matters: configuration problems must not look like data corruption.
"""


class CoregateError(Exception):
    """Base class for all package-level failures."""


class ConfigError(CoregateError):
    """Invalid configuration value, unknown key, or bad CLI argument."""


class DataError(CoregateError):
    """Missing, malformed, or inconsistent input data or artifacts."""


class FormatError(DataError):
    """A binary artifact failed validation (magic, version, truncation)."""


class NumericError(CoregateError):
    """A numerical computation produced non-finite or impossible values."""
