"""Exception hierarchy shared across the package.

CLI exit-code mapping: UsageError -> 2, OSError -> 3, ConfigError /
DataFormatError / DomainError -> 4, anything else -> 1.
"""


class EvracError(Exception):
    """Base class for all package errors."""


class UsageError(EvracError):
    """Caller violated an interface contract (bad argument, unknown mode)."""


class ConfigError(EvracError):
    """Invalid or inconsistent configuration."""


class DataFormatError(EvracError):
    """Malformed input data (files, checkpoints, records)."""


class DomainError(EvracError):
    """Value outside its mathematical domain (coordinates, probabilities, norms)."""


class ShapeError(DomainError):
    """Array shape incompatible with the operation."""


class UnknownStationError(EvracError):
    """Station id not present in the station index."""


class TrainingDiverged(EvracError):
    """A loss became non-finite; carries a diagnostic batch dump."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
