"""Exception hierarchy shared across the package."""


class ProxydetError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(ProxydetError):
    """Invalid configuration: bad mapping, mode/label mismatch, unknown class."""


class DataError(ProxydetError):
    """Malformed or inconsistent input data (file, line, and field named)."""


class TrainingError(ProxydetError):
    """Training aborted, e.g. a non-finite loss."""
