"""
Pipeline Stages
===============

Importing this package registers every stage with the shared registry.
"""

from . import evaluate, forge, invert, simulate, train_gen, train_som  # noqa: F401
from .base import (
    PipelineStage,
    RunLayout,
    StageMetadata,
    StageRegistry,
    StageResult,
    registry,
)

__all__ = [
    "PipelineStage",
    "RunLayout",
    "StageMetadata",
    "StageRegistry",
    "StageResult",
    "registry",
]
