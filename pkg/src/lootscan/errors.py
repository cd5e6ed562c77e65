"""Exception taxonomy mapped to CLI exit codes (config 2, data 3, invariant 4)."""


class LootscanError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(LootscanError):
    """Invalid configuration: bad enum value, missing file reference, bad grid."""

    exit_code = 2


class DataError(LootscanError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class InvariantError(LootscanError):
    """Internal contract violation, e.g. the train/test leakage guard tripping."""

    exit_code = 4


class DegenerateMaskError(DataError):
    """Mask has no usable pixels for the requested operation."""


class TrainingError(InvariantError):
    """Optimizer failed to meet its convergence contract."""
