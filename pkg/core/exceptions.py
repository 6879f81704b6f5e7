"""
Error types raised across dinolab.

Every error carries the process exit code the management commands use when
the error reaches the command boundary: 2 for configuration problems,
3 for numeric faults (NaN/Inf), 4 for phase-lineage violations, 1 otherwise.
"""


class DinoLabError(Exception):
    """Base class for all dinolab errors."""

    exit_code = 1


class ConfigError(DinoLabError, ValueError):
    """Invalid or unknown configuration, or a strategy missing its parameters."""

    exit_code = 2


class NumericFault(DinoLabError, ArithmeticError):
    """NaN or Inf detected in a tensor, loss or gradient."""

    exit_code = 3


class LineageError(DinoLabError):
    """A phase was started without the checkpoint it must continue from."""

    exit_code = 4


class DimensionError(DinoLabError, ValueError):
    """Operand shapes do not agree."""


class GeometryError(DinoLabError, ValueError):
    """Image or grid sides do not fit the patch / crop / radius geometry."""


class CurationError(DinoLabError, ValueError):
    """Invalid clustering or sampling request."""


class ProbeError(DinoLabError, ValueError):
    """Invalid probe input (empty train set, single class, ...)."""


class RunLockError(DinoLabError):
    """Another process holds the run directory's lock file."""
