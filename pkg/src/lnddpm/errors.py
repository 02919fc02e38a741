class DataError(Exception):
    """Input data is missing, malformed or geometrically inconsistent."""


class NumericalError(Exception):
    """A training or sampling computation produced non-finite values."""


class ConfigError(Exception):
    """A run configuration failed validation."""
