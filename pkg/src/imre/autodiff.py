"""
Tensor Autodiff
===============

Dense reverse-mode differentiation over NumPy arrays, sized for training the
error generator. Every op appends a record to its :class:`Graph`; records are
topologically ordered by construction, so :func:`backward` is a single reverse
sweep. Parameters are named leaves and gradients come back keyed by name.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

ArrayLike = Union[np.ndarray, float, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A value produced on a graph."""

    __slots__ = ("graph", "id", "data")

    def __init__(self, graph: "Graph", tensor_id: int, data: np.ndarray):
        self.graph = graph
        self.id = tensor_id
        self.data = data

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardFn


class Graph:
    """Single-writer tape of op records plus the named parameter leaves."""

    def __init__(self) -> None:
        self.nodes: List[OpRecord] = []
        self.parameters: Dict[str, int] = {}
        self.tensors: List[Tensor] = []

    def _new(self, value: np.ndarray) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise FloatingPointError("non-finite value produced on graph")
        tensor = Tensor(self, len(self.tensors), value)
        self.tensors.append(tensor)
        return tensor

    def constant(self, value: ArrayLike) -> Tensor:
        return self._new(np.array(value, dtype=np.float64))

    def parameter(self, name: str, value: ArrayLike) -> Tensor:
        if name in self.parameters:
            raise ValueError(f"parameter {name!r} already on graph")
        tensor = self._new(np.array(value, dtype=np.float64))
        self.parameters[name] = tensor.id
        return tensor

    def record(
        self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward: BackwardFn
    ) -> Tensor:
        for tensor in inputs:
            if tensor.graph is not self:
                raise ValueError("tensors from different graphs cannot be combined")
        out = self._new(value)
        self.nodes.append(OpRecord(kind, tuple(t.id for t in inputs), out.id, backward))
        return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = xW + b for a vector or a batch of row vectors."""
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: x {x.shape} incompatible with W {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} must be ({w.shape[1]},)")
    xv, wv = x.data, w.data

    def grad(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x2 = xv.reshape(-1, wv.shape[0])
        g2 = g.reshape(-1, wv.shape[1])
        return g @ wv.T, x2.T @ g2, g2.sum(axis=0)

    return x.graph.record("affine", (x, w, b), xv @ wv + b.data, grad)


def nonlinearity(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu or tanh."""
    xv = x.data
    if kind == "relu":
        mask = (xv > 0).astype(np.float64)
        return x.graph.record("relu", (x,), xv * mask, lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(xv)
        return x.graph.record("tanh", (x,), y, lambda g: (g * (1.0 - y**2),))
    raise ValueError(f"unknown nonlinearity: {kind}")


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate along ``axis``; the gradient is split back to both inputs."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    axis = axis % a.data.ndim
    off_a = a.shape[:axis] + a.shape[axis + 1:]
    off_b = b.shape[:axis] + b.shape[axis + 1:]
    if off_a != off_b:
        raise ShapeError(f"concat: off-axis mismatch {a.shape} vs {b.shape} on axis {axis}")
    cut = a.shape[axis]

    def grad(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga, gb = np.split(g, [cut], axis=axis)
        return ga, gb

    return a.graph.record("concat", (a, b), np.concatenate([a.data, b.data], axis=axis), grad)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a.graph.record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a.graph.record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return a.graph.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    return x.graph.record("scale", (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return x.graph.record("shift", (x,), x.data + c, lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return x.graph.record("exp", (x,), y, lambda g: (g * y,))


def square(x: Tensor) -> Tensor:
    xv = x.data
    return x.graph.record("square", (x,), xv**2, lambda g: (2.0 * g * xv,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; zero gradient where the clamp is active."""
    xv = x.data
    inside = ((xv >= low) & (xv <= high)).astype(np.float64)
    return x.graph.record("clip", (x,), np.clip(xv, low, high), lambda g: (g * inside,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.graph.record(
        "sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),)
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return x.graph.record(
        "mean", (x,), np.array(x.data.mean()), lambda g: (np.full(shape, float(g) / n),)
    )


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients for every parameter."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for record in reversed(graph.nodes):
        upstream = grads.get(record.output)
        if upstream is None:
            continue
        for input_id, local in zip(record.inputs, record.backward(upstream)):
            if local is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + local
            else:
                grads[input_id] = local
    return {
        name: grads.get(tensor_id, np.zeros_like(graph.tensors[tensor_id].data))
        for name, tensor_id in graph.parameters.items()
    }


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def step(
    opt: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> Dict[str, np.ndarray]:
    """One bias-corrected adaptive-moment update; returns the new parameters."""
    opt.step_count += 1
    t = opt.step_count
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = opt.first.get(name, np.zeros_like(value))
        v = opt.second.get(name, np.zeros_like(value))
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g**2
        opt.first[name], opt.second[name] = m, v
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        updated[name] = value - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)
    return updated
