"""
Error Types
===========

Exception hierarchy shared by every IMRE module. Parameter range violations are
reported by pydantic as ``ValidationError`` and are not wrapped here.
"""

from typing import Optional


class ImreError(Exception):
    """Base class for all IMRE errors."""


class GeometryError(ImreError):
    """Invalid or intersecting surface geometry."""


class ShapeError(ImreError, ValueError):
    """Array or operator shapes do not agree."""


class SimulationError(ImreError):
    """Cardiac simulation became unstable or was misconfigured."""


class SingularSystemError(ImreError):
    """A regularized normal-equation system could not be factorized."""


class NonFiniteObjectiveError(ImreError):
    """An objective returned NaN or infinity."""


class ContainerFormatError(ImreError):
    """A binary container file is malformed or has the wrong magic bytes."""


class EmptyDatasetError(ImreError):
    """An operation received no samples to work on."""


class UnlabeledMapError(ImreError):
    """A self-organizing map has no node with training members."""


class StageError(ImreError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        detail = f"{type(cause).__name__}: {cause}" if cause is not None else "failed"
        super().__init__(f"stage '{stage}' failed: {detail}")
