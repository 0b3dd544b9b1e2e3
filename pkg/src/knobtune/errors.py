"""Error types, each mapped to a distinct CLI exit code."""


class TuningError(Exception):
    """Base class for all engine errors."""

    exit_code = 4


class ConfigError(TuningError):
    """Invalid schema, flags, hyperparameters, or config files."""

    exit_code = 2


class DataError(TuningError):
    """Malformed or out-of-contract data: datasets, vectors, responses."""

    exit_code = 3


class RuntimeFailure(TuningError):
    """Failures while running: NaN losses, adapter errors, broken models."""

    exit_code = 4
