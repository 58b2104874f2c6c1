"""
Binary Containers
=================

Little-endian file formats used by every stage:

- ``IMO1`` matrix container: u32 rows, u32 cols, float64 row-major data, then a
  u32-length-prefixed UTF-8 metadata block of ``key=value`` lines.
- ``IMP1`` tensor checkpoint: u32 count, then per tensor a u32-length-prefixed
  UTF-8 name, u32 rank, u32 dims and float64 data.
- ``ISM1`` self-organizing map: u32 width, height, dim, float64 weights, then
  u32 triple count and (node id, class id, count) u32 triples.
"""

import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ContainerFormatError

PathLike = Union[str, Path]

MATRIX_MAGIC = b"IMO1"
TENSOR_MAGIC = b"IMP1"
SOM_MAGIC = b"ISM1"


def _read_exact(f: BinaryIO, size: int, path: PathLike) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise ContainerFormatError(f"{path}: truncated file")
    return data


def _read_u32(f: BinaryIO, path: PathLike) -> int:
    return int(struct.unpack("<I", _read_exact(f, 4, path))[0])


def _read_f64(f: BinaryIO, count: int, path: PathLike) -> np.ndarray:
    raw = _read_exact(f, 8 * count, path)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _check_magic(f: BinaryIO, magic: bytes, path: PathLike) -> None:
    found = f.read(4)
    if found != magic:
        raise ContainerFormatError(f"{path}: expected magic {magic!r}, found {found!r}")


def _encode_metadata(metadata: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ContainerFormatError(f"metadata key/value not representable: {key}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes) -> Dict[str, str]:
    metadata: Dict[str, str] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerFormatError(f"malformed metadata line: {line!r}")
        metadata[key] = value
    return metadata


def write_matrix(
    path: PathLike, matrix: np.ndarray, metadata: Optional[Mapping[str, object]] = None
) -> None:
    """Write a 2-D float64 matrix with metadata in the IMO1 container."""
    array = np.ascontiguousarray(matrix, dtype="<f8")
    if array.ndim != 2:
        raise ContainerFormatError(f"IMO1 holds 2-D matrices, got shape {array.shape}")
    meta = _encode_metadata(dict(metadata or {}))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<II", array.shape[0], array.shape[1]))
        f.write(array.tobytes(order="C"))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def read_matrix(path: PathLike) -> Tuple[np.ndarray, Dict[str, str]]:
    """Read an IMO1 container; returns the matrix and its metadata."""
    with open(path, "rb") as f:
        _check_magic(f, MATRIX_MAGIC, path)
        rows = _read_u32(f, path)
        cols = _read_u32(f, path)
        matrix = _read_f64(f, rows * cols, path).reshape(rows, cols)
        meta_len = _read_u32(f, path)
        metadata = _decode_metadata(_read_exact(f, meta_len, path))
    return matrix, metadata


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors as an IMP1 checkpoint (insertion order kept)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            array = np.ascontiguousarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            if array.ndim:
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes(order="C"))


def read_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    """Read an IMP1 checkpoint into an ordered name → array mapping."""
    tensors: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        _check_magic(f, TENSOR_MAGIC, path)
        count = _read_u32(f, path)
        for _ in range(count):
            name = _read_exact(f, _read_u32(f, path), path).decode("utf-8")
            rank = _read_u32(f, path)
            dims = [_read_u32(f, path) for _ in range(rank)]
            size = int(np.prod(dims)) if dims else 1
            tensors[name] = _read_f64(f, size, path).reshape(dims)
    return tensors


def write_som(
    path: PathLike,
    width: int,
    height: int,
    weights: np.ndarray,
    triples: List[Tuple[int, int, int]],
) -> None:
    """Write SOM weights (K × dim) and label histogram triples as ISM1."""
    array = np.ascontiguousarray(weights, dtype="<f8")
    if array.shape[0] != width * height:
        raise ContainerFormatError("weight rows must equal width*height")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(SOM_MAGIC)
        f.write(struct.pack("<III", width, height, array.shape[1]))
        f.write(array.tobytes(order="C"))
        f.write(struct.pack("<I", len(triples)))
        for triple in triples:
            f.write(struct.pack("<III", *triple))


def read_som(path: PathLike) -> Tuple[int, int, np.ndarray, List[Tuple[int, int, int]]]:
    """Read an ISM1 file; returns width, height, weights and histogram triples."""
    with open(path, "rb") as f:
        _check_magic(f, SOM_MAGIC, path)
        width = _read_u32(f, path)
        height = _read_u32(f, path)
        dim = _read_u32(f, path)
        weights = _read_f64(f, width * height * dim, path).reshape(width * height, dim)
        count = _read_u32(f, path)
        triples = [
            (_read_u32(f, path), _read_u32(f, path), _read_u32(f, path))
            for _ in range(count)
        ]
    return width, height, weights, triples
