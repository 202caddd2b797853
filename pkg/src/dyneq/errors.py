"""Exception types shared across the package."""

from __future__ import annotations


class DyneqError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DyneqError, ValueError):
    """Operands have inconsistent or invalid dimensions."""


class ConvergenceError(DyneqError, RuntimeError):
    """An iterative solve exhausted its budget before reaching tolerance.

    Carries the residual history (or last estimate) so callers can inspect
    how the iteration behaved.
    """

    def __init__(self, message, history=None, last_estimate=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.last_estimate = last_estimate


class DatasetError(DyneqError, ValueError):
    """A dataset directory violates the on-disk format."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message} [{path}]")
        self.path = None if path is None else str(path)


class MissingFileError(DatasetError):
    """A required dataset file does not exist."""


class DatasetShapeError(DatasetError):
    """A dataset file has the wrong number of rows/columns or bad indices."""


class NonFiniteError(DatasetError):
    """A dataset file contains NaN or infinite values."""


class MetricError(DyneqError, ValueError):
    """A metric is undefined for the supplied inputs."""
