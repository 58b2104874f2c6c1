"""
SOM Atlas
=========

Kohonen self-organizing map over latent error codes, built on MiniSom. Each
node carries a weight vector and, after training, a histogram of the error classes mapped to it; new
codes are attributed with the majority label of the nearest populated node.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from minisom import MiniSom
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import EmptyDatasetError, ShapeError, UnlabeledMapError
from .forge import LABEL_INDEX, ErrorLabel
from .storage import read_som, write_som

logger = structlog.get_logger(__name__)

CLASS_ORDER = list(ErrorLabel)

Sample = Tuple[np.ndarray, ErrorLabel]


class SomTrainConfig(BaseModel):
    """Grid size, linear schedules and update rule for SOM training."""

    width: int = Field(default=10, ge=1)
    height: int = Field(default=10, ge=1)
    gamma: Tuple[float, float] = (0.5, 0.01)
    radius: Tuple[float, float] = (5.0, 0.5)
    kind: str = "gaussian"
    update_rule: str = "kohonen"
    epochs: int = Field(default=200, ge=1)
    seed: int = 0

    @field_validator("gamma")
    @classmethod
    def validate_gamma(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        initial, final = v
        if not (0.0 < final <= initial <= 1.0):
            raise ValueError("gamma must satisfy 0 < final <= initial <= 1")
        return v

    @field_validator("radius")
    @classmethod
    def validate_radius(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        initial, final = v
        if not (0.0 < final <= initial):
            raise ValueError("radius must satisfy 0 < final <= initial")
        return v

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v: str) -> str:
        if v not in ("gaussian", "triangular"):
            raise ValueError("neighborhood must be 'gaussian' or 'triangular'")
        return v

    @field_validator("update_rule")
    @classmethod
    def validate_rule(cls, v: str) -> str:
        if v not in ("kohonen", "literal"):
            raise ValueError("update rule must be 'kohonen' or 'literal'")
        return v

    @model_validator(mode="after")
    def validate_size(self) -> "SomTrainConfig":
        if self.width * self.height < 4:
            raise ValueError("a trained map needs at least 4 nodes")
        return self

    def _fraction(self, epoch: int) -> float:
        return epoch / (self.epochs - 1) if self.epochs > 1 else 0.0

    def gamma_at(self, epoch: int) -> float:
        initial, final = self.gamma
        return initial + (final - initial) * self._fraction(epoch)

    def radius_at(self, epoch: int) -> float:
        initial, final = self.radius
        return initial + (final - initial) * self._fraction(epoch)


def lattice_positions(width: int, height: int) -> np.ndarray:
    """Node v sits at (v div height, v mod height)."""
    ids = np.arange(width * height)
    return np.stack([ids // height, ids % height], axis=1).astype(np.float64)


@dataclass
class SomGrid:
    width: int
    height: int
    weights: np.ndarray
    positions: np.ndarray = field(default=None)  # type: ignore[assignment]
    quantization_trace: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.width * self.height:
            raise ShapeError(
                f"weights must be ({self.width * self.height}, dim), got {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("SOM weights must be finite")
        if self.positions is None:
            self.positions = lattice_positions(self.width, self.height)

    @property
    def n_nodes(self) -> int:
        return self.width * self.height

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def copy(self) -> "SomGrid":
        return SomGrid(self.width, self.height, self.weights.copy(), self.positions.copy(),
                       list(self.quantization_trace))


@dataclass
class LabelMap:
    """Per-node class histogram; columns follow the ErrorLabel order."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def empty(cls, n_nodes: int) -> "LabelMap":
        return cls(np.zeros((n_nodes, len(CLASS_ORDER)), dtype=np.int64))

    @classmethod
    def from_triples(cls, n_nodes: int, triples: Sequence[Tuple[int, int, int]]) -> "LabelMap":
        lm = cls.empty(n_nodes)
        for node, class_id, count in triples:
            lm.counts[node, class_id] += count
        return lm

    def add(self, node: int, label: ErrorLabel) -> None:
        self.counts[node, LABEL_INDEX[label]] += 1

    def member_count(self, node: int) -> int:
        return int(self.counts[node].sum())

    def majority(self, node: int) -> Optional[ErrorLabel]:
        if self.member_count(node) == 0:
            return None
        return CLASS_ORDER[int(np.argmax(self.counts[node]))]

    def triples(self) -> List[Tuple[int, int, int]]:
        nodes, classes = np.nonzero(self.counts)
        return [(int(v), int(c), int(self.counts[v, c])) for v, c in zip(nodes, classes)]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _check_dim(g: SomGrid, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != g.dim:
        raise ShapeError(f"latent dim {z.shape[0]} does not match map dim {g.dim}")
    return z


def _sq_distances(g: SomGrid, z: np.ndarray) -> np.ndarray:
    return np.sum((g.weights - z) ** 2, axis=1)


class _AtlasSom(MiniSom):
    """MiniSom over a :class:`SomGrid` with the atlas schedule, rule and neighborhood.

    Node ``v`` of the grid is MiniSom cell ``divmod(v, height)``, so MiniSom's
    row-major argmin breaks BMU ties toward the smallest node index.
    """

    def __init__(
        self,
        g: SomGrid,
        kind: str = "gaussian",
        rule: str = "kohonen",
        gamma: Callable[[int], float] = lambda t: 0.0,
        radius: Callable[[int], float] = lambda t: 1.0,
    ):
        super().__init__(g.width, g.height, g.dim, sigma=1.0, learning_rate=1.0,
                         neighborhood_function="gaussian", random_seed=0)
        self._weights = g.weights.reshape(g.width, g.height, g.dim).copy()
        self._lattice = g.positions.reshape(g.width, g.height, 2)
        self.rule = rule
        self.gamma = gamma
        self.radius = radius
        if kind == "triangular":
            self.neighborhood = self._triangular
        elif kind != "gaussian":
            raise ValueError(f"unknown neighborhood kind: {kind}")
        if rule not in ("kohonen", "literal"):
            raise ValueError(f"unknown update rule: {rule}")

    def _triangular(self, c: Tuple[int, int], sigma: float) -> np.ndarray:
        dist = np.linalg.norm(self._lattice - self._lattice[c], axis=-1)
        return np.maximum(0.0, 1.0 - dist / sigma)

    def update(self, x: np.ndarray, win: Tuple[int, int], t: int, max_iteration: int) -> None:
        """Present ``x`` at epoch ``t``; the schedule replaces MiniSom's decay."""
        radius = self.radius(t)
        if radius <= 0:
            raise ValueError("neighborhood radius must be positive")
        g = self.gamma(t) * self.neighborhood(win, radius)
        target = self._weights[win] if self.rule == "literal" else self._weights
        self._weights += g[..., None] * (x - target)

    def node(self, x: np.ndarray) -> int:
        return int(np.ravel_multi_index(self.winner(x), self._weights.shape[:2]))

    def flat_weights(self) -> np.ndarray:
        return self.get_weights().reshape(-1, self._weights.shape[2]).copy()


def bmu(g: SomGrid, z: np.ndarray) -> int:
    """Best matching unit; ties go to the smallest node index."""
    return _AtlasSom(g).node(_check_dim(g, z))


def neighborhood(kind: str, p_v: np.ndarray, p_bmu: np.ndarray, radius: float) -> float:
    if radius <= 0:
        raise ValueError("neighborhood radius must be positive")
    dist2 = float(np.sum((np.asarray(p_v, float) - np.asarray(p_bmu, float)) ** 2))
    if kind == "gaussian":
        return float(np.exp(-dist2 / (2.0 * radius**2)))
    if kind == "triangular":
        return max(0.0, 1.0 - np.sqrt(dist2) / radius)
    raise ValueError(f"unknown neighborhood kind: {kind}")


def apply_update(
    g: SomGrid, z: np.ndarray, gamma: float, radius: float, kind: str, rule: str
) -> int:
    """In-place single-sample update; returns the BMU it was centred on."""
    z = _check_dim(g, z)
    som = _AtlasSom(g, kind, rule, gamma=lambda t: gamma, radius=lambda t: radius)
    win = som.winner(z)
    som.update(z, win, 0, 1)
    g.weights = som.flat_weights()
    return int(np.ravel_multi_index(win, (g.width, g.height)))


def update(g: SomGrid, z: np.ndarray, cfg: SomTrainConfig, t: int) -> SomGrid:
    """Updated copy of ``g`` after presenting ``z`` at epoch ``t``."""
    updated = g.copy()
    apply_update(updated, z, cfg.gamma_at(t), cfg.radius_at(t), cfg.kind, cfg.update_rule)
    return updated


def init_grid(latents: np.ndarray, cfg: SomTrainConfig) -> SomGrid:
    """Weights drawn uniformly over the bounding box of ``latents``."""
    latents = np.atleast_2d(latents)
    if latents.shape[0] == 0:
        raise EmptyDatasetError("cannot initialize a map without latents")
    rng = np.random.default_rng([cfg.seed, 0])
    low, high = latents.min(axis=0), latents.max(axis=0)
    weights = rng.uniform(size=(cfg.width * cfg.height, latents.shape[1])) * (high - low) + low
    return SomGrid(cfg.width, cfg.height, weights)


def _quantization(som: _AtlasSom, latents: np.ndarray) -> float:
    weights = som.get_weights()
    return float(np.mean([np.linalg.norm(z - weights[som.winner(z)]) for z in latents]))


def quantization_error(g: SomGrid, latents: np.ndarray) -> float:
    """Mean distance from each code to its BMU weight."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if latents.shape[0] == 0:
        raise EmptyDatasetError("quantization error needs at least one latent")
    if latents.shape[1] != g.dim:
        raise ShapeError(f"latent dim {latents.shape[1]} does not match map dim {g.dim}")
    return _quantization(_AtlasSom(g), latents)


def label_map(g: SomGrid, samples: Sequence[Sample]) -> LabelMap:
    som = _AtlasSom(g)
    lm = LabelMap.empty(g.n_nodes)
    for z, label in samples:
        lm.add(som.node(_check_dim(g, z)), ErrorLabel(label))
    return lm


def train_som(
    g: Optional[SomGrid], samples: Sequence[Sample], cfg: SomTrainConfig
) -> Tuple[SomGrid, LabelMap]:
    """Sequential per-sample training, then label every sample at its final BMU.

    When ``g`` is None the map is initialized from the samples' bounding box.
    """
    if not samples:
        raise EmptyDatasetError("SOM training needs at least one latent")
    latents = np.stack([np.asarray(z, dtype=np.float64).ravel() for z, _ in samples])
    grid = init_grid(latents, cfg) if g is None else g.copy()
    if latents.shape[1] != grid.dim:
        raise ShapeError(f"latent dim {latents.shape[1]} does not match map dim {grid.dim}")

    som = _AtlasSom(grid, cfg.kind, cfg.update_rule, gamma=cfg.gamma_at, radius=cfg.radius_at)
    logger.info("som_training_started", samples=len(samples), nodes=grid.n_nodes,
                epochs=cfg.epochs, rule=cfg.update_rule)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(samples))
        for index in order:
            som.update(latents[index], som.winner(latents[index]), epoch, cfg.epochs)
        qe = _quantization(som, latents)
        grid.quantization_trace.append(qe)
        logger.debug("som_epoch", epoch=epoch + 1, qe=qe, gamma=cfg.gamma_at(epoch),
                     radius=cfg.radius_at(epoch))

    grid.weights = som.flat_weights()
    lm = label_map(grid, samples)
    logger.info("som_training_finished", qe=grid.quantization_trace[-1],
                populated_nodes=int(np.count_nonzero(lm.counts.sum(axis=1))))
    return grid, lm


def classify(g: SomGrid, lm: LabelMap, z: np.ndarray) -> ErrorLabel:
    """Majority label of the nearest node that has training members."""
    order = np.argsort(_sq_distances(g, _check_dim(g, z)), kind="stable")
    for node in order:
        label = lm.majority(int(node))
        if label is not None:
            return label
    raise UnlabeledMapError("every node histogram is empty")


def cluster_frame(g: SomGrid, lm: LabelMap) -> pd.DataFrame:
    rows = []
    for node in range(g.n_nodes):
        majority = lm.majority(node)
        rows.append({
            "node_x": int(g.positions[node, 0]),
            "node_y": int(g.positions[node, 1]),
            "majority_label": majority.value if majority is not None else "",
            "member_count": lm.member_count(node),
        })
    return pd.DataFrame(rows, columns=["node_x", "node_y", "majority_label", "member_count"])


def save_clusters(path: Union[str, Path], g: SomGrid, lm: LabelMap) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cluster_frame(g, lm).to_csv(path, index=False)


def save_som(path: Union[str, Path], g: SomGrid, lm: LabelMap) -> None:
    write_som(path, g.width, g.height, g.weights, lm.triples())


def load_som(path: Union[str, Path]) -> Tuple[SomGrid, LabelMap]:
    width, height, weights, triples = read_som(path)
    return SomGrid(width, height, weights), LabelMap.from_triples(width * height, triples)
