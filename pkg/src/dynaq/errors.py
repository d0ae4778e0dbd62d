"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2, any other DynaqError
-> 1, CheckError (blown internal invariant) -> 3.
"""


class DynaqError(Exception):
    """Base class for all package errors."""


class ConfigError(DynaqError):
    """Bad config file, unknown key, or invalid option value."""


class InvalidActionError(DynaqError):
    """Action ball out of bounds or overlapping an existing body."""


class GenerationError(DynaqError):
    """Task generation could not produce a solvable, in-envelope instance."""


class TraceFormatError(DynaqError):
    """Malformed rollout trace or checkpoint file."""


class TrainingDivergedError(DynaqError):
    """Non-finite loss during training; a diagnostic checkpoint was written."""


class CheckError(DynaqError):
    """Internal invariant violated (incl. non-finite values in debug mode)."""
