class ConfigError(ValueError):
    """Bad configuration: unknown backbone, missing tap, invalid sizes."""


class DataError(ValueError):
    """Bad input data: unreadable manifest, malformed rows."""
