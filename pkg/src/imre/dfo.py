"""
Bounded Derivative-Free Minimization
====================================

Thin wrapper over Py-BOBYQA for small box-constrained problems. The wrapper
keeps every evaluation inside the box, enforces the evaluation budget, rejects
non-finite objective values and always returns the best point seen, so the
result is never worse than the start.
"""

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
import pybobyqa
import structlog
from pydantic import BaseModel, Field, model_validator

from .errors import NonFiniteObjectiveError

logger = structlog.get_logger(__name__)

Objective = Callable[[np.ndarray], float]

# The solver nudges starts near a bound inward; the cached start value covers it.
warnings.filterwarnings("ignore", message=r".*x0 .* bound", category=RuntimeWarning)


class DfoConfig(BaseModel):
    """Box bounds, evaluation budget and trust-region radii."""

    lower: List[float]
    upper: List[float]
    budget: int = Field(default=300, ge=3)
    initial_radius: float = Field(default=1.0, gt=0.0)
    tolerance: float = Field(default=1e-6, gt=0.0)

    @model_validator(mode="after")
    def validate_box(self) -> "DfoConfig":
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper bounds must have the same non-zero length")
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError("every lower bound must be below its upper bound")
        if self.budget < 2 * self.dim + 1:
            raise ValueError(f"budget must be at least 2*dim+1 = {2 * self.dim + 1}")
        return self

    @property
    def dim(self) -> int:
        return len(self.lower)

    @classmethod
    def box(cls, dim: int, bound: float, **kwargs: Any) -> "DfoConfig":
        return cls(lower=[-bound] * dim, upper=[bound] * dim, **kwargs)

    def radii(self) -> Tuple[float, float]:
        """(rhobeg, rhoend) accepted by the solver for this box."""
        width = float(np.min(np.asarray(self.upper) - np.asarray(self.lower)))
        rhobeg = min(self.initial_radius, 0.5 * width)
        return rhobeg, min(self.tolerance, 0.1 * rhobeg)


@dataclass
class DfoResult:
    z: np.ndarray
    f: float
    evaluations: int
    converged: bool
    budget_exhausted: bool
    trace: List[float] = field(default_factory=list)
    message: str = ""


class _BudgetReached(Exception):
    pass


class _BoxObjective:
    """Clipped, finite-checked, budgeted view of the objective.

    The solver's absolute coordinates are ``xbase + step`` and may round a hair
    outside the bounds; they are clipped back before ``f`` sees them. The start
    value is cached so the solver's first request does not cost a second call.
    """

    def __init__(self, f: Objective, lower: np.ndarray, upper: np.ndarray, budget: int):
        self.f = f
        self.lower = lower
        self.upper = upper
        self.budget = budget
        self.evaluations = 0
        self.best_x: Optional[np.ndarray] = None
        self.best_f = np.inf
        self.trace: List[float] = []
        self._start: Optional[np.ndarray] = None
        self._start_f = np.inf

    def start(self, x0: np.ndarray) -> float:
        self._start = x0.copy()
        self._start_f = self(x0)
        return self._start_f

    def __call__(self, x: np.ndarray) -> float:
        x = np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)
        if self._start is not None and np.array_equal(x, self._start):
            return self._start_f
        if self.evaluations >= self.budget:
            raise _BudgetReached
        value = float(self.f(x.copy()))
        self.evaluations += 1
        if not np.isfinite(value):
            raise NonFiniteObjectiveError(
                f"objective returned {value} at evaluation {self.evaluations}"
            )
        if value < self.best_f:
            self.best_f, self.best_x = value, x.copy()
        self.trace.append(self.best_f)
        return value


def dfo_minimize(
    f: Objective, cfg: DfoConfig, x0: Optional[Sequence[float]] = None
) -> DfoResult:
    """Minimize ``f`` over the box; ``x0`` defaults to the origin clipped into it."""
    lower, upper = np.asarray(cfg.lower, float), np.asarray(cfg.upper, float)
    start = np.zeros(cfg.dim) if x0 is None else np.asarray(x0, dtype=float)
    x = np.clip(start, lower, upper)
    objective = _BoxObjective(f, lower, upper, cfg.budget)
    rhobeg, rhoend = cfg.radii()
    objective.start(x)

    converged = budget_exhausted = False
    message = ""
    try:
        soln = pybobyqa.solve(
            objective,
            x.copy(),
            bounds=(lower, upper),
            npt=2 * cfg.dim + 1,
            rhobeg=rhobeg,
            rhoend=rhoend,
            maxfun=cfg.budget,
            do_logging=False,
            print_progress=False,
        )
    except _BudgetReached:
        budget_exhausted = True
        message = "evaluation budget reached"
    else:
        message = soln.msg
        if soln.flag == soln.EXIT_INPUT_ERROR:
            raise ValueError(soln.msg)
        converged = soln.flag == soln.EXIT_SUCCESS
        budget_exhausted = soln.flag == soln.EXIT_MAXFUN_WARNING
        if not (converged or budget_exhausted):
            logger.warning("dfo_stopped_early", flag=soln.flag, message=soln.msg,
                           evaluations=objective.evaluations)

    result = DfoResult(
        z=objective.best_x.copy(),
        f=objective.best_f,
        evaluations=objective.evaluations,
        converged=converged,
        budget_exhausted=budget_exhausted,
        trace=objective.trace,
        message=message,
    )
    logger.debug("dfo_finished", evaluations=result.evaluations, f=result.f,
                 converged=converged, budget_exhausted=budget_exhausted)
    return result
