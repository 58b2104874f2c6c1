"""
Experiment Pipeline
===================

Runs the enabled stages in order (forge → train-gen → train-som → simulate →
invert → evaluate), timing each and wrapping failures with the stage name.
"""

import time
from typing import Callable, List, Optional

import structlog
from pydantic import BaseModel, Field

from .compute import ComputeManager
from .config import STAGE_NAMES, ExperimentConfig
from .errors import StageError
from .stages import StageResult, registry

logger = structlog.get_logger(__name__)


class PipelineReport(BaseModel):
    results: List[StageResult] = Field(default_factory=list)

    @property
    def budget_capped(self) -> int:
        return sum(result.budget_capped for result in self.results)

    def get(self, stage: str) -> Optional[StageResult]:
        return next((r for r in self.results if r.stage == stage), None)


def run_stage(
    name: str, cfg: ExperimentConfig, compute: Optional[ComputeManager] = None
) -> StageResult:
    """Run one stage; any failure comes back as a ``StageError``."""
    stage = registry.create(name, cfg, compute)
    snapshot = stage.compute.snapshot()
    logger.info("stage_started", stage=name, cpu=snapshot.cpu_percent,
                memory=snapshot.memory_percent, rss_mb=round(snapshot.rss_mb, 1))
    start = time.perf_counter()
    try:
        result = stage.run()
    except StageError:
        raise
    except Exception as e:
        logger.error("stage_failed", stage=name, error=str(e), exc_info=True)
        raise StageError(name, e) from e
    result.elapsed_s = time.perf_counter() - start
    snapshot = stage.compute.snapshot()
    logger.info("stage_finished", stage=name, elapsed_s=round(result.elapsed_s, 3),
                rss_mb=round(snapshot.rss_mb, 1), **result.summary)
    return result


def run_pipeline(
    cfg: ExperimentConfig,
    compute: Optional[ComputeManager] = None,
    on_stage: Optional[Callable[[StageResult], None]] = None,
) -> PipelineReport:
    """Execute every enabled stage; with none enabled only the config is checked."""
    compute = compute or ComputeManager(
        max_workers=cfg.max_workers,
        cpu_threshold=cfg.cpu_threshold,
        memory_threshold=cfg.memory_threshold,
    )
    enabled = [name for name in STAGE_NAMES if cfg.is_stage_enabled(name)]
    logger.info("pipeline_started", stages=enabled, out_dir=str(cfg.get_out_path()),
                seed=cfg.seed)
    report = PipelineReport()
    for name in enabled:
        result = run_stage(name, cfg, compute)
        report.results.append(result)
        if on_stage is not None:
            on_stage(result)
    logger.info("pipeline_finished", stages=len(report.results),
                budget_capped=report.budget_capped)
    return report
