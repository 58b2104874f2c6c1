"""
Error Generator
===============

Conditional generative model ``H_f ~ p(H_f | H_i, z_r)`` with an amortized
inference network ``q(z_r | H_i, H_f)``.

Layout (dense, operators flattened row-major and standardized):

- inference encoder over ``[H_i, H_f]`` → posterior mean and log-variance; the
  mean is taken relative to the encoding of ``[H_i, H_i]``, so identical pairs
  encode to the origin
- conditioning encoder over ``H_i`` whose layer activations feed the decoder
- decoder from ``z_r``; encoder layer k is concatenated into decoder layer
  (depth − k), and the input layer skip is additive, so the output is
  ``H_i + decoded residual``; the residual at ``z = 0`` is subtracted, so
  ``G(H_i, 0) = H_i``
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, Field, field_validator

from . import autodiff as ad
from .autodiff import Graph, OptimizerState, Tensor
from .errors import EmptyDatasetError, ShapeError
from .forge import DatasetManifest, ErrorLabel, ForwardOperator, OperatorPair
from .storage import read_tensors, write_tensors

logger = structlog.get_logger(__name__)

LOGVAR_BOUND = 20.0
OUTPUT_INIT_GAIN = 0.1

SeedLike = Union[int, Sequence[int]]
OperatorInput = Union[ForwardOperator, np.ndarray, Sequence[ForwardOperator]]


class GeneratorConfig(BaseModel):
    """Training hyperparameters of the error generator."""

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=64, ge=1)
    latent_dim: int = Field(default=16, ge=1)
    beta: float = Field(default=0.001, gt=0.0)
    lambda_reg: float = Field(default=0.02, ge=0.0)
    hidden_widths: List[int] = Field(default_factory=lambda: [128, 32])
    learning_rate: float = Field(default=1e-3, gt=0.0)
    seed: int = 0

    @field_validator("hidden_widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        if not v or any(w < 1 for w in v):
            raise ValueError("hidden widths must be a non-empty list of positive ints")
        return v


@dataclass
class LatentCode:
    z: np.ndarray

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent code must be finite")

    @property
    def dim(self) -> int:
        return int(self.z.shape[-1])


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_variance = np.clip(
            np.asarray(self.log_variance, dtype=np.float64), -LOGVAR_BOUND, LOGVAR_BOUND
        )
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError("posterior mean and log-variance shapes differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_variance))):
            raise ValueError("posterior parameters must be finite")


@dataclass
class OperatorScaler:
    """Per-entry center and scalar residual scale for network inputs."""

    center: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls, shape: Tuple[int, int]) -> "OperatorScaler":
        return cls(center=np.zeros(shape), scale=1.0)

    @classmethod
    def fit(cls, h_i: np.ndarray, h_f: np.ndarray) -> "OperatorScaler":
        center = np.concatenate([h_i, h_f]).mean(axis=0)
        scale = float(np.std(h_f - h_i))
        if scale <= 1e-15:
            scale = float(np.std(h_i - center)) or 1.0
        return cls(center=center, scale=scale)

    def transform(self, stack: np.ndarray) -> np.ndarray:
        """(B, M, N) operators → (B, M·N) standardized rows."""
        return ((stack - self.center) / self.scale).reshape(stack.shape[0], -1)

    def inverse(self, flat: np.ndarray) -> np.ndarray:
        """(B, M·N) standardized rows → (B, M, N) operators."""
        return self.center + self.scale * flat.reshape((flat.shape[0],) + self.center.shape)


class GeneratorModel:
    """Parameters, architecture sizes and input scaler of the error generator."""

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        operator_shape: Tuple[int, int],
        latent_dim: int,
        hidden_widths: Sequence[int],
        scaler: Optional[OperatorScaler] = None,
    ):
        self.params = params
        self.operator_shape = (int(operator_shape[0]), int(operator_shape[1]))
        self.latent_dim = int(latent_dim)
        self.hidden_widths = [int(w) for w in hidden_widths]
        self.scaler = scaler or OperatorScaler.identity(self.operator_shape)

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    @property
    def flat_dim(self) -> int:
        return self.operator_shape[0] * self.operator_shape[1]

    @classmethod
    def initialize(
        cls, operator_shape: Tuple[int, int], cfg: GeneratorConfig
    ) -> "GeneratorModel":
        """Glorot-uniform weights and zero biases from ``cfg.seed``."""
        rng = np.random.default_rng(cfg.seed)
        d = operator_shape[0] * operator_shape[1]
        widths = list(cfg.hidden_widths)
        latent = cfg.latent_dim
        params: Dict[str, np.ndarray] = {}

        def dense(name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> None:
            limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}.w"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{name}.b"] = np.zeros(fan_out)

        fan_in = 2 * d
        for k, width in enumerate(widths):
            dense(f"inference.{k}", fan_in, width)
            fan_in = width
        dense("inference.mean", fan_in, latent)
        dense("inference.logvar", fan_in, latent)

        fan_in = d
        for k, width in enumerate(widths):
            dense(f"condition.{k}", fan_in, width)
            fan_in = width

        dense("decoder.latent", latent, widths[-1])
        for j in range(len(widths) - 1, 0, -1):
            dense(f"decoder.{j}", 2 * widths[j], widths[j - 1])
        dense("decoder.out", 2 * widths[0], d, gain=OUTPUT_INIT_GAIN)

        return cls(params, operator_shape, latent, widths)

    def to_tensors(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.params)
        tensors["scaler.center"] = self.scaler.center
        tensors["scaler.scale"] = np.array([self.scaler.scale])
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "GeneratorModel":
        tensors = dict(tensors)
        center = tensors.pop("scaler.center")
        scale = float(tensors.pop("scaler.scale")[0])
        widths = []
        k = 0
        while f"condition.{k}.w" in tensors:
            widths.append(tensors[f"condition.{k}.w"].shape[1])
            k += 1
        latent = tensors["decoder.latent.w"].shape[0]
        shape = (int(center.shape[0]), int(center.shape[1]))
        return cls(tensors, shape, latent, widths, OperatorScaler(center, scale))

    def save(self, path: Union[str, Path]) -> None:
        write_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GeneratorModel":
        return cls.from_tensors(read_tensors(path))


@dataclass
class LossTerms:
    """Scalar loss on its graph plus the individual term values."""

    graph: Graph
    total: Tensor
    reconstruction: float
    kl: float
    identity: float = 0.0


class EpochLoss(BaseModel):
    epoch: int
    elbo_term: float
    kl_term: float
    identity_term: float
    total: float


@dataclass
class TrainingResult:
    model: GeneratorModel
    curve: List[EpochLoss]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.curve])

    def save_log(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def _as_stack(ops: OperatorInput) -> np.ndarray:
    if isinstance(ops, ForwardOperator):
        return ops.matrix[None]
    if isinstance(ops, np.ndarray):
        return ops[None] if ops.ndim == 2 else ops
    return np.stack([op.matrix for op in ops])


def _checked_stack(m: GeneratorModel, ops: OperatorInput) -> np.ndarray:
    stack = _as_stack(ops)
    if stack.ndim != 3 or tuple(stack.shape[1:]) != m.operator_shape:
        raise ShapeError(
            f"operator shape {tuple(stack.shape[1:])} does not match model {m.operator_shape}"
        )
    return stack


def _bind(graph: Graph, params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: graph.parameter(name, value) for name, value in params.items()}


def _generation_params(m: GeneratorModel) -> Dict[str, np.ndarray]:
    return {k: v for k, v in m.params.items() if not k.startswith("inference.")}


def _layer(t: Dict[str, Tensor], name: str, x: Tensor, activate: bool = True) -> Tensor:
    y = ad.affine(x, t[f"{name}.w"], t[f"{name}.b"])
    return ad.nonlinearity(y, "tanh") if activate else y


def _inference_trunk(m: GeneratorModel, t: Dict[str, Tensor], x_i: Tensor, x_f: Tensor) -> Tensor:
    h = ad.concat(x_i, x_f, axis=-1)
    for k in range(m.depth):
        h = _layer(t, f"inference.{k}", h)
    return h


def _infer(
    m: GeneratorModel, t: Dict[str, Tensor], x_i: Tensor, x_f: Tensor
) -> Tuple[Tensor, Tensor]:
    """Posterior parameters; the mean is measured from the identical pair (x_i, x_i)."""
    h = _inference_trunk(m, t, x_i, x_f)
    anchor = _inference_trunk(m, t, x_i, x_i)
    mean = ad.sub(
        _layer(t, "inference.mean", h, activate=False),
        _layer(t, "inference.mean", anchor, activate=False),
    )
    log_var = ad.clip(_layer(t, "inference.logvar", h, activate=False), -LOGVAR_BOUND, LOGVAR_BOUND)
    return mean, log_var


def _condition(m: GeneratorModel, t: Dict[str, Tensor], x_i: Tensor) -> List[Tensor]:
    skips = []
    h = x_i
    for k in range(m.depth):
        h = _layer(t, f"condition.{k}", h)
        skips.append(h)
    return skips


def _residual(m: GeneratorModel, t: Dict[str, Tensor], z: Tensor, skips: List[Tensor]) -> Tensor:
    d = _layer(t, "decoder.latent", z)
    for j in range(m.depth - 1, 0, -1):
        d = _layer(t, f"decoder.{j}", ad.concat(d, skips[j], axis=-1))
    return _layer(t, "decoder.out", ad.concat(d, skips[0], axis=-1), activate=False)


def _decode(
    m: GeneratorModel, t: Dict[str, Tensor], z: Tensor, skips: List[Tensor], x_i: Tensor
) -> Tensor:
    """x_i plus the decoded residual at z, less the residual at the origin."""
    origin = z.graph.constant(np.zeros(z.shape))
    residual = ad.sub(_residual(m, t, z, skips), _residual(m, t, origin, skips))
    return ad.add(x_i, residual)


def _sample(graph: Graph, mean: Tensor, log_var: Tensor, eps: np.ndarray) -> Tensor:
    std = ad.exp(ad.scale(log_var, 0.5))
    return ad.add(mean, ad.mul(std, graph.constant(eps)))


def _kl(mean: Tensor, log_var: Tensor) -> Tensor:
    batch = mean.shape[0]
    inner = ad.sub(ad.add(ad.exp(log_var), ad.square(mean)), ad.shift(log_var, 1.0))
    return ad.scale(ad.sum_all(inner), 0.5 / batch)


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean_all(ad.square(ad.sub(a, b)))


def _noise(seed: SeedLike, shape: Tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def _elbo_graph(
    m: GeneratorModel, x_i: np.ndarray, x_f: np.ndarray, beta: float, seed: SeedLike
) -> Tuple[Graph, Dict[str, Tensor], Tensor, Tensor, Tensor]:
    graph = Graph()
    t = _bind(graph, m.params)
    xi, xf = graph.constant(x_i), graph.constant(x_f)
    mean, log_var = _infer(m, t, xi, xf)
    z = _sample(graph, mean, log_var, _noise(seed, mean.shape))
    recon = _mse(_decode(m, t, z, _condition(m, t, xi), xi), xf)
    kl = _kl(mean, log_var)
    total = ad.add(recon, ad.scale(kl, beta))
    return graph, t, total, recon, kl


def _combined_on_arrays(
    m: GeneratorModel,
    x_i: np.ndarray,
    x_f: np.ndarray,
    beta: float,
    lambda_reg: float,
    seed: SeedLike,
) -> LossTerms:
    graph, t, elbo, recon, kl = _elbo_graph(m, x_i, x_f, beta, seed)
    xi = graph.constant(x_i)
    mean, log_var = _infer(m, t, xi, xi)
    seeds = [seed] if isinstance(seed, int) else list(seed)
    z = _sample(graph, mean, log_var, _noise(seeds + [1], mean.shape))
    identity = _mse(_decode(m, t, z, _condition(m, t, xi), xi), xi)
    total = ad.add(elbo, ad.scale(identity, lambda_reg))
    return LossTerms(graph, total, float(recon.data), float(kl.data), float(identity.data))


def encode(m: GeneratorModel, h_i: OperatorInput, h_f: OperatorInput) -> GaussianPosterior:
    """Posterior q(z_r | H_i, H_f); vectors for one pair, rows for a batch."""
    single = isinstance(h_i, ForwardOperator) or (isinstance(h_i, np.ndarray) and h_i.ndim == 2)
    stack_i, stack_f = _checked_stack(m, h_i), _checked_stack(m, h_f)
    if stack_i.shape != stack_f.shape:
        raise ShapeError(f"pair shapes differ: {stack_i.shape} vs {stack_f.shape}")
    graph = Graph()
    t = _bind(graph, m.params)
    mean, log_var = _infer(
        m,
        t,
        graph.constant(m.scaler.transform(stack_i)),
        graph.constant(m.scaler.transform(stack_f)),
    )
    if single:
        return GaussianPosterior(mean.data[0], log_var.data[0])
    return GaussianPosterior(mean.data, log_var.data)


def reparameterize(p: GaussianPosterior, seed: SeedLike) -> LatentCode:
    """z = mean + exp(log_variance / 2) ⊙ ε with ε from a seeded stream."""
    eps = _noise(seed, p.mean.shape)
    return LatentCode(p.mean + np.exp(p.log_variance / 2.0) * eps)


def generate_matrices(m: GeneratorModel, h_i: OperatorInput, z: np.ndarray) -> np.ndarray:
    """Decoder mean for a stack of prior operators and matching latent rows."""
    stack = _checked_stack(m, h_i)
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z2.shape != (stack.shape[0], m.latent_dim):
        raise ShapeError(f"latent shape {z2.shape} does not match ({stack.shape[0]}, {m.latent_dim})")
    graph = Graph()
    t = _bind(graph, _generation_params(m))
    xi = graph.constant(m.scaler.transform(stack))
    out = _decode(m, t, graph.constant(z2), _condition(m, t, xi), xi)
    return m.scaler.inverse(out.data)


def corrector(
    m: GeneratorModel, h_i: Union[ForwardOperator, np.ndarray]
) -> Callable[[np.ndarray], np.ndarray]:
    """``z -> G(H_i, z)`` for one fixed prior; the conditioning pass runs once."""
    stack = _checked_stack(m, h_i)
    if stack.shape[0] != 1:
        raise ShapeError("corrector takes a single prior operator")
    x_i = m.scaler.transform(stack)
    graph = Graph()
    t = _bind(graph, {k: v for k, v in m.params.items() if k.startswith("condition.")})
    skips = [s.data for s in _condition(m, t, graph.constant(x_i))]
    decoder = {k: v for k, v in m.params.items() if k.startswith("decoder.")}

    def apply(z: np.ndarray) -> np.ndarray:
        z2 = np.asarray(z, dtype=np.float64).reshape(1, -1)
        if z2.shape[1] != m.latent_dim:
            raise ShapeError(f"latent dim {z2.shape[1]} does not match model {m.latent_dim}")
        g = Graph()
        out = _decode(m, _bind(g, decoder), g.constant(z2), [g.constant(s) for s in skips],
                      g.constant(x_i))
        return m.scaler.inverse(out.data)[0]

    return apply


def generate(m: GeneratorModel, h_i: ForwardOperator, z: Union[LatentCode, np.ndarray]) -> ForwardOperator:
    """Corrected operator G(H_i, z)."""
    code = z.z if isinstance(z, LatentCode) else np.asarray(z)
    matrix = generate_matrices(m, h_i, code.reshape(1, -1))[0]
    return ForwardOperator(matrix=matrix, id=f"{h_i.id}:generated", spec=None)


def kl_standard_normal(p: GaussianPosterior) -> float:
    """KL(q || N(0, I)); rows of a batch are averaged."""
    lv = p.log_variance
    per_row = 0.5 * np.sum(np.exp(lv) + p.mean**2 - 1.0 - lv, axis=-1)
    return float(np.mean(per_row))


def elbo_loss(
    m: GeneratorModel, h_i: OperatorInput, h_f: OperatorInput, beta: float, seed: SeedLike
) -> LossTerms:
    """Reconstruction MSE (standardized units) plus beta times KL."""
    x_i = m.scaler.transform(_checked_stack(m, h_i))
    x_f = m.scaler.transform(_checked_stack(m, h_f))
    graph, _, total, recon, kl = _elbo_graph(m, x_i, x_f, beta, seed)
    return LossTerms(graph, total, float(recon.data), float(kl.data))


def combined_loss(
    m: GeneratorModel,
    h_i: OperatorInput,
    h_f: OperatorInput,
    cfg: GeneratorConfig,
    seed: SeedLike,
) -> LossTerms:
    """ELBO loss plus lambda_reg times the identical-pair reconstruction error."""
    x_i = m.scaler.transform(_checked_stack(m, h_i))
    x_f = m.scaler.transform(_checked_stack(m, h_f))
    return _combined_on_arrays(m, x_i, x_f, cfg.beta, cfg.lambda_reg, seed)


def train(
    m: GeneratorModel, manifest: DatasetManifest, cfg: GeneratorConfig
) -> TrainingResult:
    """Minibatch training of both encoders and the decoder on the train split."""
    pairs = manifest.train_pairs()
    if not pairs:
        raise EmptyDatasetError("train split is empty")

    raw_i = np.stack([p.h_i.matrix for p in pairs])
    raw_f = np.stack([p.h_f.matrix for p in pairs])
    m.scaler = OperatorScaler.fit(raw_i, raw_f)
    x_i, x_f = m.scaler.transform(raw_i), m.scaler.transform(raw_f)
    n = len(pairs)
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    curve: List[EpochLoss] = []

    logger.info("generator_training_started", pairs=n, epochs=cfg.epochs,
                batch_size=cfg.batch_size, scale=m.scaler.scale)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            terms = _combined_on_arrays(
                m, x_i[idx], x_f[idx], cfg.beta, cfg.lambda_reg, [cfg.seed, epoch, batch]
            )
            grads = ad.backward(terms.graph, terms.total)
            m.params = ad.step(opt, m.params, grads)
            elbo = terms.reconstruction + cfg.beta * terms.kl
            sums += len(idx) * np.array(
                [elbo, terms.kl, terms.identity, float(terms.total.data)]
            )
        sums /= n
        curve.append(EpochLoss(epoch=epoch + 1, elbo_term=sums[0], kl_term=sums[1],
                               identity_term=sums[2], total=sums[3]))
        logger.info("generator_epoch", epoch=epoch + 1, total=sums[3],
                    elbo=sums[0], kl=sums[1], identity=sums[2])
    return TrainingResult(model=m, curve=curve)


def latent_codes(
    m: GeneratorModel, pairs: Sequence[OperatorPair], batch_size: int = 256
) -> Tuple[np.ndarray, List[ErrorLabel]]:
    """Posterior means E[z_r] and error labels for a list of pairs."""
    if not pairs:
        return np.zeros((0, m.latent_dim)), []
    means = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        posterior = encode(m, [p.h_i for p in chunk], [p.h_f for p in chunk])
        means.append(np.atleast_2d(posterior.mean))
    return np.concatenate(means), [p.label for p in pairs]
