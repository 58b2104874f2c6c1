"""
Operator Forge
==============

Builds the synthetic two-surface geometry, the surrogate mechanistic forward
operator on it, labeled erroneous operators and the paired train/test dataset.

The transfer kernel is a row-normalized monopole ``(1 + c·patch(n)) / (4π d)``
between every sensor node ``m`` and source node ``n``.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from .compute import ComputeManager
from .errors import EmptyDatasetError, GeometryError, ShapeError
from .storage import read_matrix, write_matrix

logger = structlog.get_logger(__name__)

MIN_NODES = 8
MIN_BASE_CLEARANCE_MM = 10.0
MIN_KERNEL_DISTANCE_MM = 1.0
SOURCE_SEMI_AXES = (35.0, 35.0, 50.0)
SENSOR_SEMI_AXES = (180.0, 140.0, 220.0)
TRAIN_FRACTION = 0.8
MAX_SPEC_ATTEMPTS = 200
_SPLIT_STREAM = 7919


class ErrorLabel(str, Enum):
    """Closed enumeration of error classes."""

    ROT_X = "rot_x"
    ROT_Y = "rot_y"
    ROT_Z = "rot_z"
    TRANS_X = "trans_x"
    TRANS_Y = "trans_y"
    TRANS_Z = "trans_z"
    SCALE = "scale"
    INHOMOGENEITY = "inhomogeneity"
    COMPOUND = "compound"


DEFAULT_CLASSES = [
    ErrorLabel.ROT_Z,
    ErrorLabel.TRANS_X,
    ErrorLabel.TRANS_Y,
    ErrorLabel.TRANS_Z,
    ErrorLabel.SCALE,
    ErrorLabel.INHOMOGENEITY,
]

LABEL_INDEX = {label: index for index, label in enumerate(ErrorLabel)}


class SurfaceTag(str, Enum):
    SOURCE = "source"
    SENSOR = "sensor"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class SurfaceMesh:
    """Closed triangulated surface sampled on an ellipsoid."""

    nodes: np.ndarray
    edges: np.ndarray
    surface_tag: SurfaceTag
    center: np.ndarray
    semi_axes: np.ndarray

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise GeometryError(f"nodes must be (n, 3), got {self.nodes.shape}")
        if self.nodes.shape[0] < MIN_NODES:
            raise GeometryError(f"mesh needs at least {MIN_NODES} nodes")
        if not np.all(np.isfinite(self.nodes)):
            raise GeometryError("mesh coordinates must be finite")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise GeometryError("adjacency must be irreflexive")
        if not self.is_connected():
            raise GeometryError("mesh graph is disconnected")

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def adjacency_matrix(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix."""
        adjacency = np.zeros((self.n_nodes, self.n_nodes))
        adjacency[self.edges[:, 0], self.edges[:, 1]] = 1.0
        adjacency[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return adjacency

    def degree(self) -> np.ndarray:
        return self.adjacency_matrix().sum(axis=1)

    def is_connected(self) -> bool:
        graph = csr_matrix(self.adjacency_matrix())
        count, _ = connected_components(graph, directed=False)
        return bool(count == 1)

    def contains(self, points: np.ndarray) -> bool:
        """True when every point lies strictly inside this mesh's ellipsoid."""
        scaled = (np.asarray(points) - self.center) / self.semi_axes
        return bool(np.all(np.sum(scaled**2, axis=1) < 1.0))

    def moved(
        self, nodes: np.ndarray, center: np.ndarray, semi_axes: Optional[np.ndarray] = None
    ) -> "SurfaceMesh":
        """Same connectivity at new node positions."""
        return SurfaceMesh(
            nodes=nodes,
            edges=self.edges,
            surface_tag=self.surface_tag,
            center=np.asarray(center, dtype=np.float64),
            semi_axes=self.semi_axes if semi_axes is None else semi_axes,
        )


class ErrorSpec(BaseModel):
    """Labeled geometric/conductivity perturbation behind an erroneous operator."""

    model_config = ConfigDict(frozen=True)

    rotation_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    torso_scale: float = Field(default=1.0, ge=0.9, le=1.4)
    conductivity: float = Field(default=0.0, ge=0.0, le=0.13)
    label: ErrorLabel = ErrorLabel.COMPOUND

    @field_validator("rotation_deg")
    @classmethod
    def validate_rotation(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        rx, ry, rz = v
        if not (-50.0 <= rx <= 20.0 and -50.0 <= ry <= 20.0):
            raise ValueError("rx and ry must lie in [-50, 20] degrees")
        if not -80.0 <= rz <= 10.0:
            raise ValueError("rz must lie in [-80, 10] degrees")
        return v

    @field_validator("translation_mm")
    @classmethod
    def validate_translation(
        cls, v: Tuple[float, float, float]
    ) -> Tuple[float, float, float]:
        if any(not -60.0 <= t <= 60.0 for t in v):
            raise ValueError("translation components must lie in [-60, 60] mm")
        return v

    def to_metadata(self) -> Dict[str, str]:
        rx, ry, rz = self.rotation_deg
        tx, ty, tz = self.translation_mm
        return {
            "label": self.label.value,
            "rx": repr(rx), "ry": repr(ry), "rz": repr(rz),
            "tx": repr(tx), "ty": repr(ty), "tz": repr(tz),
            "torso_scale": repr(self.torso_scale),
            "conductivity": repr(self.conductivity),
        }

    @classmethod
    def from_metadata(cls, metadata: Dict[str, str]) -> "ErrorSpec":
        return cls(
            rotation_deg=(float(metadata["rx"]), float(metadata["ry"]), float(metadata["rz"])),
            translation_mm=(float(metadata["tx"]), float(metadata["ty"]), float(metadata["tz"])),
            torso_scale=float(metadata["torso_scale"]),
            conductivity=float(metadata["conductivity"]),
            label=ErrorLabel(metadata["label"]),
        )


@dataclass
class ForwardOperator:
    """M×N transfer matrix (sensor leads × source nodes)."""

    matrix: np.ndarray
    id: str
    spec: Optional[ErrorSpec] = None

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError(f"operator must be 2-D, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"operator {self.id} has non-finite entries")
        if np.linalg.norm(self.matrix) <= 0.0:
            raise ValueError(f"operator {self.id} has zero Frobenius norm")

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.matrix.shape[0]), int(self.matrix.shape[1]))

    @property
    def label(self) -> Optional[ErrorLabel]:
        return self.spec.label if self.spec is not None else None


@dataclass
class OperatorPair:
    """A prior operator H_i and the operator H_f it should become."""

    pair_id: str
    h_i: ForwardOperator
    h_f: ForwardOperator
    label: ErrorLabel

    def __post_init__(self) -> None:
        if self.h_i.shape != self.h_f.shape:
            raise ShapeError(f"pair {self.pair_id}: {self.h_i.shape} vs {self.h_f.shape}")
        if self.h_f.spec is not None and self.h_i.spec is not None:
            if self.label != self.h_f.spec.label:
                raise ValueError(f"pair {self.pair_id}: label must match h_f spec")


@dataclass
class DatasetManifest:
    """Operator pairs with their train/test assignment."""

    pairs: List[OperatorPair]
    splits: List[Split]
    seed: Optional[int] = None
    base: Optional[ForwardOperator] = None
    _index: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if len(self.pairs) != len(self.splits):
            raise ValueError("every pair needs exactly one split")
        self._index = {pair.pair_id: i for i, pair in enumerate(self.pairs)}
        if len(self._index) != len(self.pairs):
            raise ValueError("pair ids must be unique")

    def split_of(self, pair_id: str) -> Split:
        return self.splits[self._index[pair_id]]

    def pairs_in(self, split: Split) -> List[OperatorPair]:
        return [p for p, s in zip(self.pairs, self.splits) if s == split]

    def train_pairs(self) -> List[OperatorPair]:
        return self.pairs_in(Split.TRAIN)

    def test_pairs(self) -> List[OperatorPair]:
        return self.pairs_in(Split.TEST)


def _ellipsoid_nodes(
    n: int, semi_axes: Sequence[float], rng: np.random.Generator
) -> np.ndarray:
    """Fibonacci lattice on the unit sphere; index order runs pole to pole."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z**2)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * i + rng.uniform(0.0, 2.0 * math.pi)
    unit = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return unit * np.asarray(semi_axes)


def _hull_edges(points: np.ndarray) -> np.ndarray:
    hull = ConvexHull(points)
    edges = set()
    for a, b, c in hull.simplices:
        for i, j in ((a, b), (b, c), (a, c)):
            edges.add((min(i, j), max(i, j)))
    return np.array(sorted(edges), dtype=np.int64)


def _ellipsoid_mesh(
    n: int, semi_axes: Sequence[float], tag: SurfaceTag, rng: np.random.Generator
) -> SurfaceMesh:
    nodes = _ellipsoid_nodes(n, semi_axes, rng)
    return SurfaceMesh(
        nodes=nodes,
        edges=_hull_edges(nodes / np.asarray(semi_axes)),
        surface_tag=tag,
        center=np.zeros(3),
        semi_axes=np.asarray(semi_axes, dtype=np.float64),
    )


def make_base_geometry(
    n_source: int, n_sensor: int, seed: int
) -> Tuple[SurfaceMesh, SurfaceMesh]:
    """Nested source (heart) and sensor (torso) ellipsoid meshes."""
    if n_source < MIN_NODES:
        raise GeometryError("n_source below minimum")
    if n_sensor < MIN_NODES:
        raise GeometryError("n_sensor below minimum")

    rng = np.random.default_rng(seed)
    source = _ellipsoid_mesh(n_source, SOURCE_SEMI_AXES, SurfaceTag.SOURCE, rng)
    sensor = _ellipsoid_mesh(n_sensor, SENSOR_SEMI_AXES, SurfaceTag.SENSOR, rng)

    if not sensor.contains(source.nodes):
        raise GeometryError("surfaces intersect")
    clearance = cdist(sensor.nodes, source.nodes).min()
    if clearance < MIN_BASE_CLEARANCE_MM:
        raise GeometryError(f"surfaces intersect (clearance {clearance:.2f} mm)")
    return source, sensor


def conductivity_patch(n_source: int) -> np.ndarray:
    """Fixed contiguous polar cap (first quarter of source node indices)."""
    mask = np.zeros(n_source)
    mask[: math.ceil(n_source / 4)] = 1.0
    return mask


def transfer_kernel(
    source_nodes: np.ndarray,
    sensor_nodes: np.ndarray,
    conductivity: float,
    patch: np.ndarray,
    normalize: bool = True,
) -> np.ndarray:
    """Monopole transfer matrix; rows scaled to unit sum when ``normalize``."""
    distance = cdist(np.atleast_2d(sensor_nodes), np.atleast_2d(source_nodes))
    if distance.min() < MIN_KERNEL_DISTANCE_MM:
        raise GeometryError(
            f"near-singular kernel: node distance {distance.min():.3f} mm < 1 mm"
        )
    kernel = (1.0 + conductivity * np.asarray(patch)) / (4.0 * math.pi * distance)
    if normalize:
        kernel = kernel / kernel.sum(axis=1, keepdims=True)
    return kernel


def mechanistic_operator(
    source: SurfaceMesh,
    sensor: SurfaceMesh,
    conductivity: float = 0.0,
    op_id: str = "base",
    spec: Optional[ErrorSpec] = None,
) -> ForwardOperator:
    """Surrogate forward operator for a source/sensor geometry."""
    matrix = transfer_kernel(
        source.nodes, sensor.nodes, conductivity, conductivity_patch(source.n_nodes)
    )
    return ForwardOperator(matrix=matrix, id=op_id, spec=spec)


def transform_geometry(
    base: Tuple[SurfaceMesh, SurfaceMesh], spec: ErrorSpec
) -> Tuple[SurfaceMesh, SurfaceMesh]:
    """Rotate then translate the source mesh; scale the sensor mesh about its center."""
    source, sensor = base
    rotation = Rotation.from_euler("xyz", spec.rotation_deg, degrees=True).as_matrix()
    translation = np.asarray(spec.translation_mm)
    moved_nodes = (source.nodes - source.center) @ rotation.T + source.center + translation
    moved_source = source.moved(moved_nodes, source.center + translation)

    scale = spec.torso_scale
    scaled_nodes = sensor.center + scale * (sensor.nodes - sensor.center)
    scaled_sensor = sensor.moved(scaled_nodes, sensor.center, sensor.semi_axes * scale)

    if not scaled_sensor.contains(moved_source.nodes):
        raise GeometryError("transformed source mesh exits the sensor surface")
    return moved_source, scaled_sensor


def apply_error(
    base: Tuple[SurfaceMesh, SurfaceMesh], spec: ErrorSpec, op_id: str = "erroneous"
) -> ForwardOperator:
    """Operator of the base geometry after the perturbation described by ``spec``."""
    source, sensor = transform_geometry(base, spec)
    return mechanistic_operator(source, sensor, spec.conductivity, op_id=op_id, spec=spec)


def sample_spec(label: ErrorLabel, rng: np.random.Generator) -> ErrorSpec:
    """Uniform draw within the ranges of the parameters ``label`` perturbs."""
    def rot_xy() -> float:
        return float(rng.uniform(-50.0, 20.0))

    def trans() -> float:
        return float(rng.uniform(-60.0, 60.0))

    rotation = [0.0, 0.0, 0.0]
    translation = [0.0, 0.0, 0.0]
    scale, conductivity = 1.0, 0.0

    if label == ErrorLabel.ROT_X:
        rotation[0] = rot_xy()
    elif label == ErrorLabel.ROT_Y:
        rotation[1] = rot_xy()
    elif label == ErrorLabel.ROT_Z:
        rotation[2] = float(rng.uniform(-80.0, 10.0))
    elif label == ErrorLabel.TRANS_X:
        translation[0] = trans()
    elif label == ErrorLabel.TRANS_Y:
        translation[1] = trans()
    elif label == ErrorLabel.TRANS_Z:
        translation[2] = trans()
    elif label == ErrorLabel.SCALE:
        scale = float(rng.uniform(0.9, 1.4))
    elif label == ErrorLabel.INHOMOGENEITY:
        conductivity = float(rng.uniform(0.0, 0.13))
    else:
        rotation = [rot_xy(), rot_xy(), float(rng.uniform(-80.0, 10.0))]
        translation = [trans(), trans(), trans()]
        scale = float(rng.uniform(0.9, 1.4))
        conductivity = float(rng.uniform(0.0, 0.13))

    return ErrorSpec(
        rotation_deg=tuple(rotation),  # type: ignore[arg-type]
        translation_mm=tuple(translation),  # type: ignore[arg-type]
        torso_scale=scale,
        conductivity=conductivity,
        label=label,
    )


def _build_erroneous(
    base: Tuple[SurfaceMesh, SurfaceMesh], label: ErrorLabel, seed: int, index: int
) -> ForwardOperator:
    # Per-index stream keeps results independent of worker scheduling.
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_SPEC_ATTEMPTS):
        spec = sample_spec(label, rng)
        try:
            return apply_error(base, spec, op_id=f"op{index:04d}")
        except GeometryError:
            continue
    raise GeometryError(f"no admissible {label.value} spec after {MAX_SPEC_ATTEMPTS} draws")


def assign_splits(n_pairs: int, seed: int) -> List[Split]:
    """Random 80-20 train/test assignment, reproducible from ``seed``."""
    rng = np.random.default_rng([seed, _SPLIT_STREAM])
    order = rng.permutation(n_pairs)
    n_train = int(round(TRAIN_FRACTION * n_pairs))
    splits = [Split.TEST] * n_pairs
    for index in order[:n_train]:
        splits[int(index)] = Split.TRAIN
    return splits


def forge_dataset(
    count: int,
    classes: Sequence[ErrorLabel],
    seed: int,
    n_source: int = 96,
    n_sensor: int = 64,
    pairing: str = "base",
    compute: Optional[ComputeManager] = None,
) -> DatasetManifest:
    """Sample ``count`` labeled operators and pair them for training."""
    classes = [ErrorLabel(c) for c in classes]
    if not classes:
        raise EmptyDatasetError("at least one error class is required")
    if count < 2 * len(classes):
        raise ValueError(f"count must be at least 2 x {len(classes)} classes")
    if pairing not in ("base", "exhaustive"):
        raise ValueError(f"unknown pairing policy: {pairing}")

    geometry = make_base_geometry(n_source, n_sensor, seed)
    base = mechanistic_operator(*geometry, conductivity=0.0, op_id="base")

    labels = [classes[i % len(classes)] for i in range(count)]
    compute = compute or ComputeManager()
    operators = compute.map(
        lambda i: _build_erroneous(geometry, labels[i], seed, i), list(range(count))
    )

    pairs: List[OperatorPair] = []
    if pairing == "base":
        for op in operators:
            pairs.append(OperatorPair(f"pair{len(pairs):06d}", base, op, op.spec.label))  # type: ignore[union-attr]
    else:
        for h_f in operators:
            for h_i in [base] + operators:
                if h_i is h_f:
                    continue
                pairs.append(
                    OperatorPair(f"pair{len(pairs):06d}", h_i, h_f, h_f.spec.label)  # type: ignore[union-attr]
                )

    manifest = DatasetManifest(pairs, assign_splits(len(pairs), seed), seed=seed, base=base)
    logger.info(
        "dataset_forged",
        operators=count,
        pairs=len(pairs),
        train=len(manifest.train_pairs()),
        test=len(manifest.test_pairs()),
        pairing=pairing,
    )
    return manifest


def operator_metadata(op: ForwardOperator) -> Dict[str, str]:
    metadata = {"id": op.id}
    if op.spec is not None:
        metadata.update(op.spec.to_metadata())
    return metadata


def save_operator(path: Union[str, Path], op: ForwardOperator) -> None:
    write_matrix(path, op.matrix, operator_metadata(op))


def load_operator(path: Union[str, Path]) -> ForwardOperator:
    matrix, metadata = read_matrix(path)
    spec = ErrorSpec.from_metadata(metadata) if "label" in metadata else None
    return ForwardOperator(matrix=matrix, id=metadata.get("id", Path(path).stem), spec=spec)


def save_dataset(manifest: DatasetManifest, out_dir: Union[str, Path]) -> Path:
    """Write every operator once as IMO1 and the pairs as a JSONL manifest."""
    out = Path(out_dir)
    (out / "operators").mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}

    def path_for(op: ForwardOperator) -> str:
        if op.id not in written:
            relative = f"operators/{op.id}.imo"
            save_operator(out / relative, op)
            written[op.id] = relative
        return written[op.id]

    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as f:
        for pair, split in zip(manifest.pairs, manifest.splits):
            record = {
                "pair_id": pair.pair_id,
                "h_i_path": path_for(pair.h_i),
                "h_f_path": path_for(pair.h_f),
                "label": pair.label.value,
                "split": split.value,
            }
            f.write(json.dumps(record) + "\n")
    return manifest_path


def load_dataset(out_dir: Union[str, Path], seed: Optional[int] = None) -> DatasetManifest:
    """Reload a dataset written by :func:`save_dataset`."""
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")

    cache: Dict[str, ForwardOperator] = {}

    def load(relative: str) -> ForwardOperator:
        if relative not in cache:
            cache[relative] = load_operator(out / relative)
        return cache[relative]

    pairs: List[OperatorPair] = []
    splits: List[Split] = []
    with open(manifest_path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            pairs.append(
                OperatorPair(
                    record["pair_id"],
                    load(record["h_i_path"]),
                    load(record["h_f_path"]),
                    ErrorLabel(record["label"]),
                )
            )
            splits.append(Split(record["split"]))
    base = next((op for op in cache.values() if op.spec is None), None)
    return DatasetManifest(pairs, splits, seed=seed, base=base)
