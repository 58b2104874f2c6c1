"""
Inverse Engine
==============

Second-order Tikhonov solves on the source-mesh Laplacian, L-curve selection of
the regularization weight, and the alternating estimate of source potential
and corrected operator through the trained generator's latent space.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .cardiac import BodyRecording, HeartPotential
from .dfo import DfoConfig, dfo_minimize
from .errors import GeometryError, ShapeError, SingularSystemError
from .forge import ErrorLabel, ForwardOperator, SurfaceMesh
from .generator import GeneratorModel, LatentCode, corrector
from .som import LabelMap, SomGrid, classify

logger = structlog.get_logger(__name__)

RIDGE = 1e-10
_TINY = 1e-300

MatrixLike = Union[ForwardOperator, np.ndarray]


@dataclass
class LaplacianOperator:
    """Graph Laplacian D − A of the source mesh."""

    matrix: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def gram(self) -> np.ndarray:
        return self.matrix.T @ self.matrix


def laplacian_from_adjacency(adjacency: np.ndarray) -> LaplacianOperator:
    adjacency = np.asarray(adjacency, dtype=np.float64)
    count, _ = connected_components(csr_matrix(adjacency), directed=False)
    if count != 1:
        raise GeometryError(f"graph has {count} connected components")
    return LaplacianOperator(np.diag(adjacency.sum(axis=1)) - adjacency)


def build_laplacian(mesh: SurfaceMesh) -> LaplacianOperator:
    return laplacian_from_adjacency(mesh.adjacency_matrix())


class Convergence(BaseModel):
    tol_u: float = Field(default=1e-4, gt=0.0)
    tol_h: float = Field(default=1e-4, gt=0.0)
    max_outer: int = Field(default=10, ge=1)


class OuterIteration(BaseModel):
    outer_iter: int
    dfo_evals: int
    residual: float
    rel_du: float
    rel_dh: float


@dataclass
class InverseProblem:
    y: BodyRecording
    h_i: ForwardOperator
    model: GeneratorModel
    lam: float
    laplacian: LaplacianOperator

    def __post_init__(self) -> None:
        m, n = self.h_i.shape
        if self.y.matrix.shape[0] != m:
            raise ShapeError(f"recording has {self.y.matrix.shape[0]} leads, operator {m}")
        if self.laplacian.n_nodes != n:
            raise ShapeError(f"Laplacian has {self.laplacian.n_nodes} nodes, operator {n}")
        if self.model.operator_shape != (m, n):
            raise ShapeError(f"model expects {self.model.operator_shape}, operator is {(m, n)}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class InverseResult:
    u: HeartPotential
    h_f: ForwardOperator
    z: LatentCode
    trace: List[OuterIteration] = field(default_factory=list)
    converged: bool = False
    initial_residual: float = 0.0

    @property
    def dfo_evaluations(self) -> int:
        return sum(row.dfo_evals for row in self.trace)


IterationCallback = Callable[[OuterIteration, HeartPotential, ForwardOperator], None]


def _matrix(x: Union[MatrixLike, BodyRecording, HeartPotential]) -> np.ndarray:
    return x.matrix if hasattr(x, "matrix") else np.asarray(x, dtype=np.float64)


def _solve(h: np.ndarray, y: np.ndarray, lam: float, gram_l: np.ndarray) -> np.ndarray:
    system = h.T @ h + lam * gram_l + RIDGE * np.eye(h.shape[1])
    try:
        factor = cho_factor(system, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as e:
        raise SingularSystemError(f"regularized normal equations not factorizable: {e}") from e
    return cho_solve(factor, h.T @ y)


def tikhonov_solve(
    h: MatrixLike,
    y: Union[BodyRecording, np.ndarray],
    lam: float,
    laplacian: Union[LaplacianOperator, np.ndarray],
) -> HeartPotential:
    """Per-column minimizer of ‖y − Hu‖² + λ‖Lu‖² (plus a 1e-10 ridge)."""
    h_m, y_m = _matrix(h), _matrix(y)
    l_m = laplacian.matrix if isinstance(laplacian, LaplacianOperator) else np.asarray(laplacian)
    if h_m.shape[0] != y_m.shape[0] or l_m.shape != (h_m.shape[1], h_m.shape[1]):
        raise ShapeError(f"inconsistent shapes H {h_m.shape}, y {y_m.shape}, L {l_m.shape}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    u = _solve(h_m, y_m, lam, l_m.T @ l_m)
    dt = y.dt if isinstance(y, BodyRecording) else 1.0
    return HeartPotential(u, dt=dt)


def lcurve_lambda(
    h: MatrixLike,
    y: Union[BodyRecording, np.ndarray],
    laplacian: LaplacianOperator,
    lambdas: Optional[Sequence[float]] = None,
) -> float:
    """λ at the corner (maximum curvature) of the log residual vs log seminorm curve."""
    grid = np.asarray(lambdas if lambdas is not None else np.logspace(-6, 1, 29), float)
    if grid.size < 3 or np.any(grid <= 0):
        raise ValueError("L-curve needs at least three positive lambdas")
    grid = np.sort(grid)
    h_m, y_m = _matrix(h), _matrix(y)
    gram_l = laplacian.gram
    rho, eta = [], []
    for lam in grid:
        u = _solve(h_m, y_m, float(lam), gram_l)
        rho.append(np.log(np.linalg.norm(y_m - h_m @ u) + _TINY))
        eta.append(np.log(np.linalg.norm(laplacian.matrix @ u) + _TINY))
    t = np.log(grid)
    d_rho, d_eta = np.gradient(rho, t), np.gradient(eta, t)
    dd_rho, dd_eta = np.gradient(d_rho, t), np.gradient(d_eta, t)
    curvature = (d_rho * dd_eta - dd_rho * d_eta) / ((d_rho**2 + d_eta**2) ** 1.5 + _TINY)
    best = float(grid[1 + int(np.argmax(curvature[1:-1]))])
    logger.debug("lcurve_selected", lam=best)
    return best


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), _TINY))


def alternate_optimize(
    p: InverseProblem,
    dfo: DfoConfig,
    conv: Convergence,
    on_iteration: Optional[IterationCallback] = None,
) -> InverseResult:
    """Alternate latent DFO over z with Tikhonov re-solves until u and H_f settle."""
    if dfo.dim != p.model.latent_dim:
        raise ShapeError(f"DFO dimension {dfo.dim} != latent dimension {p.model.latent_dim}")
    h_i, y = p.h_i.matrix, p.y.matrix
    gram_l = p.laplacian.gram

    corrected = corrector(p.model, h_i)

    def objective(z: np.ndarray) -> float:
        h = corrected(z)
        return float(np.linalg.norm(y - h @ _solve(h, y, p.lam, gram_l)))

    u = _solve(h_i, y, p.lam, gram_l)
    h_f = h_i
    initial_residual = float(np.linalg.norm(y - h_i @ u))
    z = np.clip(np.zeros(dfo.dim), dfo.lower, dfo.upper)
    trace: List[OuterIteration] = []
    converged = False

    for outer in range(1, conv.max_outer + 1):
        found = dfo_minimize(objective, dfo, x0=z)
        z = found.z
        h_new = corrected(z)
        u_new = _solve(h_new, y, p.lam, gram_l)
        record = OuterIteration(
            outer_iter=outer,
            dfo_evals=found.evaluations,
            residual=found.f,
            rel_du=_relative_change(u_new, u),
            rel_dh=_relative_change(h_new, h_f),
        )
        trace.append(record)
        u, h_f = u_new, h_new
        logger.info("outer_iteration", **record.model_dump(), dfo_converged=found.converged)
        if on_iteration is not None:
            on_iteration(record, HeartPotential(u, p.y.dt),
                         ForwardOperator(h_f, f"{p.h_i.id}:outer{outer}"))
        if record.rel_du < conv.tol_u and record.rel_dh < conv.tol_h:
            converged = True
            break

    return InverseResult(
        u=HeartPotential(u, p.y.dt),
        h_f=ForwardOperator(h_f, f"{p.h_i.id}:corrected"),
        z=LatentCode(z),
        trace=trace,
        converged=converged,
        initial_residual=initial_residual,
    )


def detect_error_source(z: Union[LatentCode, np.ndarray], g: SomGrid, lm: LabelMap) -> ErrorLabel:
    code = z.z if isinstance(z, LatentCode) else np.asarray(z)
    return classify(g, lm, code)
