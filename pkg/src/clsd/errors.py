"""Exception types shared across the package."""


class ClsdError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ClsdError):
    """A corpus, record, or model wiring violates its declared schema."""


class CorpusFormatError(ClsdError):
    """A corpus file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ClsdError):
    """An invalid configuration value."""


class ContractViolation(ClsdError):
    """A caller broke a documented precondition."""


class CheckpointError(ClsdError):
    """A checkpoint file is missing, truncated, or of the wrong version."""


class NonFiniteError(ClsdError):
    """A loss or gradient went non-finite; carries a small diagnostic payload."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndefinedMetricError(ClsdError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class InsufficientDataError(ClsdError):
    """Too few samples to compute a statistic."""
