"""Exception hierarchy. CLI exit codes are attached to the top-level groups."""
from __future__ import annotations


class PackingError(Exception):
    exit_code = 4


class ConfigError(PackingError, ValueError):
    exit_code = 2


class DataError(PackingError, ValueError):
    exit_code = 3


class InstanceError(DataError):
    """A box cannot be placed in the bin under any rotation, or dims are invalid."""


class InstanceFormatError(DataError):
    def __init__(self, message: str, lineno: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno
        self.path = path


class MissingCheckpointError(PackingError):
    """A learned method was requested but its checkpoint cannot be found."""


class InvalidActionError(PackingError, ValueError):
    pass


class UndefinedMetricError(PackingError, ValueError):
    pass


class EpisodeCompleteError(PackingError, RuntimeError):
    pass


class NonFiniteLossError(PackingError, FloatingPointError):
    pass


class ValidationFailure(PackingError):
    """A solution violates the environment's physical invariants."""

    exit_code = 3
