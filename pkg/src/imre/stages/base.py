"""
Stage System
============

Pipeline stages share one interface and one output layout; the registry maps
stage names to stage classes.
"""

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Type

import structlog
from pydantic import BaseModel, Field

from ..compute import ComputeManager
from ..config import ExperimentConfig
from ..forge import SurfaceMesh, make_base_geometry

logger = structlog.get_logger(__name__)


class StageMetadata(BaseModel):
    """Metadata for a stage."""

    name: str
    description: str
    requires: List[str] = Field(default_factory=list)
    produces: List[str] = Field(default_factory=list)


class StageResult(BaseModel):
    stage: str
    outputs: Dict[str, str] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
    elapsed_s: float = 0.0
    budget_capped: int = 0


@dataclass
class RunLayout:
    """Where every artifact of a run lives below ``root``."""

    root: Path

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def generator_path(self) -> Path:
        return self.root / "model" / "generator.imp"

    @property
    def som_path(self) -> Path:
        return self.root / "model" / "atlas.ism"

    @property
    def cases_dir(self) -> Path:
        return self.root / "cases"

    @property
    def cases_manifest(self) -> Path:
        return self.cases_dir / "cases.jsonl"

    @property
    def inverse_dir(self) -> Path:
        return self.root / "inverse"

    @property
    def inverse_manifest(self) -> Path:
        return self.inverse_dir / "results.jsonl"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def report(self, name: str) -> Path:
        return self.reports_dir / name

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run the '{stage}' stage first")
        return path


def write_jsonl(path: Path, records: List[Dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


class PipelineStage(ABC):
    """Base interface for all stages."""

    def __init__(self, cfg: ExperimentConfig, compute: Optional[ComputeManager] = None):
        self.cfg = cfg
        self.compute = compute or ComputeManager(
            max_workers=cfg.max_workers,
            cpu_threshold=cfg.cpu_threshold,
            memory_threshold=cfg.memory_threshold,
        )
        self.layout = RunLayout(cfg.get_out_path())
        self.metadata = self.get_metadata()
        self.logger = logger.bind(stage=self.metadata.name)

    @abstractmethod
    def get_metadata(self) -> StageMetadata:
        """Return stage metadata."""

    @abstractmethod
    def run(self) -> StageResult:
        """Execute the stage and return what it wrote."""

    def is_enabled(self) -> bool:
        return self.cfg.is_stage_enabled(self.metadata.name)

    def source_mesh(self) -> SurfaceMesh:
        source, _ = make_base_geometry(self.cfg.n_source, self.cfg.n_sensor, self.cfg.seed)
        return source


class StageRegistry:
    """Registry for pipeline stages."""

    def __init__(self) -> None:
        self.stages: Dict[str, Type[PipelineStage]] = {}

    def register(self, name: str) -> Callable[[Type[PipelineStage]], Type[PipelineStage]]:
        def decorator(cls: Type[PipelineStage]) -> Type[PipelineStage]:
            if name in self.stages:
                raise ValueError(f"stage {name!r} registered twice")
            self.stages[name] = cls
            return cls
        return decorator

    def get(self, name: str) -> Type[PipelineStage]:
        if name not in self.stages:
            raise KeyError(f"unknown stage {name!r}; known: {list(self.stages)}")
        return self.stages[name]

    def names(self) -> List[str]:
        return list(self.stages)

    def create(
        self, name: str, cfg: ExperimentConfig, compute: Optional[ComputeManager] = None
    ) -> PipelineStage:
        return self.get(name)(cfg, compute)


registry = StageRegistry()
