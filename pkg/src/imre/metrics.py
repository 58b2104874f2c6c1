"""
Evaluation Metrics
==================

RMSE, frame/node-averaged Pearson correlations, activation times and pacing
localization for reconstructed source potentials.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
from pydantic import BaseModel, Field

from .cardiac import HeartPotential, PacingSite
from .errors import ShapeError
from .forge import ForwardOperator, SurfaceMesh

ArrayOrMatrix = Union[np.ndarray, HeartPotential, ForwardOperator]

# Below this sum of squares a frame or node counts as constant.
_DEGENERATE_SS = 1e-24


class Metrics(BaseModel):
    rmse: float = Field(ge=0.0)
    scc: float = Field(ge=-1.0, le=1.0)
    tcc: float = Field(ge=-1.0, le=1.0)
    loc_dist_mm: float = Field(ge=0.0)


@dataclass
class ActivationTimes:
    times: np.ndarray
    peak_slope: np.ndarray
    degenerate: np.ndarray


def _values(x: ArrayOrMatrix) -> np.ndarray:
    return np.asarray(getattr(x, "matrix", x), dtype=np.float64)


def rmse(a: ArrayOrMatrix, b: ArrayOrMatrix) -> float:
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"rmse: shape mismatch {av.shape} vs {bv.shape}")
    return float(np.sqrt(np.mean((av - bv) ** 2)))


def _columnwise_pearson(a: np.ndarray, b: np.ndarray, what: str) -> float:
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    ss_a, ss_b = np.sum(ac**2, axis=0), np.sum(bc**2, axis=0)
    valid = (ss_a > _DEGENERATE_SS) & (ss_b > _DEGENERATE_SS)
    if not np.any(valid):
        raise ValueError(f"all {what} have zero variance")
    r = np.sum(ac[:, valid] * bc[:, valid], axis=0) / np.sqrt(ss_a[valid] * ss_b[valid])
    return float(np.clip(np.mean(r), -1.0, 1.0))


def spatial_cc(u_est: ArrayOrMatrix, u_true: ArrayOrMatrix) -> float:
    """Pearson correlation across nodes per frame, averaged over usable frames."""
    a, b = _values(u_est), _values(u_true)
    if a.shape != b.shape:
        raise ShapeError(f"spatial_cc: shape mismatch {a.shape} vs {b.shape}")
    return _columnwise_pearson(a, b, "frames")


def temporal_cc(u_est: ArrayOrMatrix, u_true: ArrayOrMatrix) -> float:
    """Pearson correlation across time per node, averaged over usable nodes."""
    a, b = _values(u_est), _values(u_true)
    if a.shape != b.shape:
        raise ShapeError(f"temporal_cc: shape mismatch {a.shape} vs {b.shape}")
    return _columnwise_pearson(a.T, b.T, "nodes")


def activation_time(u: HeartPotential) -> ActivationTimes:
    """Per node, the time of maximum |du/dt|; flat traces get time 0 and a flag."""
    if u.n_samples < 3:
        raise ValueError("activation time needs at least 3 samples")
    slope = np.abs(np.diff(u.matrix, axis=1)) / u.dt
    peak = slope.max(axis=1)
    degenerate = peak <= 0.0
    times = (np.argmax(slope, axis=1) + 1) * u.dt
    times[degenerate] = 0.0
    return ActivationTimes(times=times, peak_slope=peak, degenerate=degenerate)


def earliest_node(u: HeartPotential) -> int:
    """Earliest-activating node; ties go to the steepest upstroke, then the lowest index."""
    at = activation_time(u)
    candidates = np.flatnonzero(~at.degenerate)
    if candidates.size == 0:
        candidates = np.arange(u.n_nodes)
    first = at.times[candidates].min()
    tied = candidates[at.times[candidates] == first]
    return int(tied[np.argmax(at.peak_slope[tied])])


def localization_distance(u_est: HeartPotential, mesh: SurfaceMesh, true_site: PacingSite) -> float:
    if not 0 <= true_site.node < mesh.n_nodes:
        raise ValueError(f"pacing node {true_site.node} outside mesh")
    estimated = earliest_node(u_est)
    return float(np.linalg.norm(mesh.nodes[estimated] - mesh.nodes[true_site.node]))


def evaluate_solution(
    u_est: HeartPotential, u_true: HeartPotential, mesh: SurfaceMesh, site: PacingSite
) -> Metrics:
    return Metrics(
        rmse=rmse(u_est, u_true),
        scc=spatial_cc(u_est, u_true),
        tcc=temporal_cc(u_est, u_true),
        loc_dist_mm=localization_distance(u_est, mesh, site),
    )
