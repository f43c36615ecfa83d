"""Exception taxonomy, mirrored by the CLI exit codes."""


class ShardmaxError(Exception):
    """Base class for everything this package raises on purpose."""


class ConfigError(ShardmaxError):
    """Invalid configuration or usage (CLI exit code 2)."""


class DataError(ShardmaxError):
    """Missing, malformed, or inconsistent data files (CLI exit code 3)."""


class NumericError(ShardmaxError):
    """NaN/Inf or other numeric failure detected (CLI exit code 4)."""
