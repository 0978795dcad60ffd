"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: parameter/config problems exit 2, bad
input data exits 3, numerical aborts exit 4.
"""


class EventVPRError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(EventVPRError, ValueError):
    """An argument is outside its allowed range (N <= 0, C = 0, alpha <= 0, ...)."""


class ConfigError(ParameterError):
    """A configuration document failed validation."""


class DataError(EventVPRError, ValueError):
    """Input data is malformed or inconsistent."""


class EventFormatError(DataError):
    """A line of an event file could not be parsed."""

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}:"
        if lineno is not None:
            where += f"{lineno}:"
        super().__init__(f"{where} {message}" if where else message)


class EventValidationError(DataError):
    """Events violate an invariant (ordering, bounds, polarity)."""


class ShapeError(DataError):
    """Array shapes do not agree."""


class DomainError(DataError):
    """A value lies outside the mathematical domain of an operation."""


class ClusterInitError(DataError):
    """Cluster initialisation lacks enough distinct samples."""


class MiningError(DataError):
    """A training triplet could not be mined."""


class EvaluationError(DataError):
    """Retrieval evaluation could not be carried out."""


class TrainingAborted(EventVPRError, RuntimeError):
    """Training hit a non-finite loss; ``dump_path`` holds the diagnostics."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message)
