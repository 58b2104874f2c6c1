"""
Cardiac Simulation
==================

Two-variable Aliev–Panfilov excitation on the source-mesh graph, explicit Euler
in time, with the graph Laplacian standing in for diffusion. The activation
variable is used directly as the source potential.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field
from scipy.spatial.distance import cdist

from .errors import ShapeError, SimulationError
from .forge import ForwardOperator, SurfaceMesh
from .storage import read_matrix, write_matrix

logger = structlog.get_logger(__name__)

BLOWUP_LIMIT = 10.0
STABILITY_LIMIT = 0.5


class APParams(BaseModel):
    k: float = Field(default=8.0, gt=0.0)
    a: float = Field(default=0.15, gt=0.0, lt=1.0)
    eps0: float = Field(default=0.002, gt=0.0)
    mu1: float = Field(default=0.2, ge=0.0)
    mu2: float = Field(default=0.3, gt=0.0)
    diffusion: float = Field(default=0.8, gt=0.0)
    dt: float = Field(default=0.05, gt=0.0, description="ms per Euler step")
    steps: int = Field(default=1000, ge=2)
    record_every: int = Field(default=10, ge=1)
    stimulus_ms: float = Field(default=1.0, gt=0.0)

    @property
    def sample_dt(self) -> float:
        """Spacing of recorded samples in ms."""
        return self.dt * self.record_every

    def check_stability(self, max_degree: float) -> None:
        bound = self.dt * self.diffusion * max_degree
        if bound >= STABILITY_LIMIT:
            raise SimulationError(
                f"explicit step unstable: dt*diffusion*max_degree = {bound:.3f} >= {STABILITY_LIMIT}"
            )


@dataclass
class APState:
    act: np.ndarray
    rec: np.ndarray

    @classmethod
    def rest(cls, n: int) -> "APState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class PacingSite:
    node: int
    onset_ms: float = 0.0


@dataclass
class HeartPotential:
    """Source potentials, nodes × time samples."""

    matrix: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 2:
            raise ShapeError(f"potential must be (N, T>=2), got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("potential must be finite")

    @property
    def n_nodes(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.matrix.shape[1])


@dataclass
class BodyRecording:
    """Sensor recordings, leads × time samples."""

    matrix: np.ndarray
    dt: float
    snr_db: Optional[float] = None

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError(f"recording must be 2-D, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("recording must be finite")


def _reaction(act: np.ndarray, rec: np.ndarray, p: APParams) -> Tuple[np.ndarray, np.ndarray]:
    d_act = -p.k * act * (act - p.a) * (act - 1.0) - act * rec
    eps = p.eps0 + p.mu1 * rec / (act + p.mu2)
    d_rec = eps * (-rec - p.k * act * (act - p.a - 1.0))
    return d_act, d_rec


def simulate_ap(
    mesh: SurfaceMesh, pacing: Optional[PacingSite], p: APParams
) -> HeartPotential:
    """Integrate from rest; ``pacing=None`` runs without stimulus."""
    adjacency = mesh.adjacency_matrix()
    degree = adjacency.sum(axis=1)
    p.check_stability(float(degree.max()))
    laplacian = np.diag(degree) - adjacency
    if pacing is not None and not 0 <= pacing.node < mesh.n_nodes:
        raise SimulationError(f"pacing node {pacing.node} outside mesh of {mesh.n_nodes} nodes")

    state = APState.rest(mesh.n_nodes)
    frames: List[np.ndarray] = [state.act.copy()]
    for step in range(p.steps):
        t = step * p.dt
        if pacing is not None and pacing.onset_ms <= t < pacing.onset_ms + p.stimulus_ms:
            state.act[pacing.node] = 1.0
        d_act, d_rec = _reaction(state.act, state.rec, p)
        state.act = state.act + p.dt * (d_act - p.diffusion * (laplacian @ state.act))
        state.rec = state.rec + p.dt * d_rec
        peak = max(np.abs(state.act).max(), np.abs(state.rec).max())
        if not math.isfinite(peak) or peak > BLOWUP_LIMIT:
            raise SimulationError(
                f"simulation diverged at step {step + 1} (t={t + p.dt:.3f} ms, |value|={peak:.3g})"
            )
        if (step + 1) % p.record_every == 0:
            frames.append(state.act.copy())

    logger.debug("ap_simulated", nodes=mesh.n_nodes, samples=len(frames),
                 pacing_node=None if pacing is None else pacing.node)
    return HeartPotential(np.stack(frames, axis=1), dt=p.sample_dt)


def forward_project(h: ForwardOperator, u: HeartPotential) -> BodyRecording:
    if h.shape[1] != u.n_nodes:
        raise ShapeError(f"operator {h.shape} cannot project {u.n_nodes} source nodes")
    return BodyRecording(h.matrix @ u.matrix, dt=u.dt)


def add_noise(y: BodyRecording, snr_db: float, seed: Union[int, Sequence[int]]) -> BodyRecording:
    """White Gaussian noise at ``snr_db`` over all entries; ``inf`` leaves ``y`` clean."""
    if math.isinf(snr_db) and snr_db > 0:
        return BodyRecording(y.matrix.copy(), y.dt, snr_db)
    signal_power = float(np.mean(y.matrix**2))
    if signal_power == 0.0:
        raise ValueError("cannot add noise at a fixed SNR to an all-zero recording")
    noise_power = signal_power / 10.0 ** (snr_db / 10.0)
    noise = np.random.default_rng(seed).standard_normal(y.matrix.shape) * math.sqrt(noise_power)
    return BodyRecording(y.matrix + noise, y.dt, snr_db)


def pick_pacing_sites(
    mesh: SurfaceMesh, count: int, seed: int, onset_ms: float = 0.0
) -> List[PacingSite]:
    """Well-separated nodes by farthest-point sampling from a seeded start."""
    if not 1 <= count <= mesh.n_nodes:
        raise ValueError(f"cannot pick {count} pacing sites on {mesh.n_nodes} nodes")
    distance = cdist(mesh.nodes, mesh.nodes)
    chosen = [int(np.random.default_rng([seed, 3]).integers(mesh.n_nodes))]
    nearest = distance[chosen[0]].copy()
    while len(chosen) < count:
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, distance[nxt])
    return [PacingSite(node, onset_ms) for node in chosen]


def save_potential(
    path: Union[str, Path], u: HeartPotential, pacing: Optional[PacingSite] = None
) -> None:
    metadata = {"dt": repr(u.dt)}
    if pacing is not None:
        metadata["pacing_node"] = str(pacing.node)
        metadata["onset_ms"] = repr(pacing.onset_ms)
    write_matrix(path, u.matrix, metadata)


def load_potential(path: Union[str, Path]) -> HeartPotential:
    matrix, metadata = read_matrix(path)
    return HeartPotential(matrix, dt=float(metadata["dt"]))


def save_recording(path: Union[str, Path], y: BodyRecording) -> None:
    metadata = {"dt": repr(y.dt)}
    if y.snr_db is not None:
        metadata["snr_db"] = repr(y.snr_db)
    write_matrix(path, y.matrix, metadata)


def load_recording(path: Union[str, Path]) -> BodyRecording:
    matrix, metadata = read_matrix(path)
    snr = metadata.get("snr_db")
    return BodyRecording(matrix, dt=float(metadata["dt"]), snr_db=float(snr) if snr else None)
