import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, List, Optional, Sequence, Tuple

import numpy as np

from logic.errors import ContractViolation, DataIOError
from logic.linalg import log_softmax
from logic.models import SgdConfig

NET_MAGIC = b"PQNET1"


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("MlpParams needs one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractViolation(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"layer {i} expects {W.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.version)

    def layer_flat(self, i: int) -> np.ndarray:
        return np.concatenate([self.weights[i].ravel(), self.biases[i]])


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "MlpGrads":
        return cls([np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases])

    def add_(self, other: "MlpGrads", scale: float = 1.0) -> "MlpGrads":
        for a, b in zip(self.weights, other.weights):
            a += scale * b
        for a, b in zip(self.biases, other.biases):
            a += scale * b
        return self


@dataclass
class OutputHead:
    W: np.ndarray

    @property
    def capacity(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "OutputHead":
        return OutputHead(self.W.copy())


@dataclass
class FreezeMask:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    trainable_fraction: float = 1.0

    @classmethod
    def all_trainable(cls, params: MlpParams) -> "FreezeMask":
        return cls([np.ones(W.shape, dtype=bool) for W in params.weights],
                   [np.ones(b.shape, dtype=bool) for b in params.biases], 1.0)

    @classmethod
    def all_frozen(cls, params: MlpParams) -> "FreezeMask":
        return cls([np.zeros(W.shape, dtype=bool) for W in params.weights],
                   [np.zeros(b.shape, dtype=bool) for b in params.biases], 0.0)

    def layer_flat(self, i: int) -> np.ndarray:
        return np.concatenate([self.weights[i].ravel(), self.biases[i]])

    def trainable_count(self) -> int:
        return int(sum(m.sum() for m in self.weights) + sum(m.sum() for m in self.biases))


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    version: int = -1
    single: bool = True


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    # layer_sizes = [input, hidden..., embedding]
    if len(layer_sizes) < 2:
        raise ContractViolation("an MLP needs at least input and embedding sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_head(capacity: int, embedding_dim: int, rng: np.random.Generator) -> OutputHead:
    limit = math.sqrt(6.0 / (capacity + embedding_dim))
    return OutputHead(rng.uniform(-limit, limit, size=(capacity, embedding_dim)))


def forward(params: MlpParams, x) -> Tuple[np.ndarray, ForwardCache]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != params.input_dim:
        raise ContractViolation(f"input has {a.shape[1]} features, network expects {params.input_dim}")
    cache = ForwardCache(version=params.version, single=single)
    last = params.layer_count - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ W.T + b
        cache.pre_activations.append(z)
        a = z if i == last else np.tanh(z)
    return (a[0] if single else a), cache


def embed(params: MlpParams, X) -> np.ndarray:
    out, _ = forward(params, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return out


def backward(params: MlpParams, cache: ForwardCache, grad_wrt_embedding) -> MlpGrads:
    if cache.version != params.version or len(cache.inputs) != params.layer_count:
        raise ContractViolation("stale forward cache: parameters changed since the forward pass")
    g = np.atleast_2d(np.asarray(grad_wrt_embedding, dtype=np.float64))
    if g.shape != cache.pre_activations[-1].shape:
        raise ContractViolation(f"embedding gradient shape {g.shape} does not match {cache.pre_activations[-1].shape}")
    grads = MlpGrads.zeros_like(params)
    last = params.layer_count - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (1.0 - np.tanh(cache.pre_activations[i]) ** 2)
        grads.weights[i] = g.T @ cache.inputs[i]
        grads.biases[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i]
    return grads


def head_logits(head: OutputHead, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != head.W.shape[1]:
        raise ContractViolation(f"embedding has {z.shape[-1]} dims, head expects {head.W.shape[1]}")
    return z @ head.W.T


def cross_entropy_loss(logits, label) -> Tuple[float, np.ndarray]:
    """Mean CE; 2-D logits take one label per row and the gradient is divided by the row count."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, d = rows.shape
    if labels.shape != (n,):
        raise ContractViolation(f"{labels.size} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= d:
        raise ContractViolation(f"labels out of range for {d} classes")
    lp = log_softmax(rows)
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return float(-lp[np.arange(n), labels].mean()), (grad / n).reshape(logits.shape)


def select_freeze_mask(params: MlpParams, trainable_fraction: float) -> FreezeMask:
    """Per layer, the lowest-|w| fraction stays trainable; high-magnitude weights are frozen.

    Ties in |w| go to the lower flat index (weights row-major, then bias).
    """
    if not 0 < trainable_fraction <= 1:
        raise ContractViolation(f"trainable_fraction must be in (0, 1], got {trainable_fraction}")
    w_masks, b_masks = [], []
    for i, W in enumerate(params.weights):
        flat = np.abs(params.layer_flat(i))
        if flat.size == 0:
            raise ContractViolation(f"layer {i} is empty")
        keep = int(math.floor(trainable_fraction * flat.size + 0.5))
        order = np.argsort(flat, kind="stable")
        mask = np.zeros(flat.size, dtype=bool)
        mask[order[:keep]] = True
        w_masks.append(mask[:W.size].reshape(W.shape))
        b_masks.append(mask[W.size:].copy())
    return FreezeMask(w_masks, b_masks, trainable_fraction)


def learning_rate(epoch: int, cfg: SgdConfig) -> float:
    lr = cfg.initial_lr
    for milestone, mult in cfg.milestones:
        if epoch >= milestone:
            lr *= mult
    return lr


def _masked(w: np.ndarray, g: np.ndarray, m: Optional[np.ndarray], lr: float, decay: float) -> np.ndarray:
    if g.shape != w.shape:
        raise ContractViolation(f"gradient shape {g.shape} does not match parameter {w.shape}")
    step = w - lr * (g + decay * w)
    return step if m is None else np.where(m, step, w)


def sgd_step(params: MlpParams, grads: MlpGrads, mask: FreezeMask, epoch: int, cfg: SgdConfig) -> MlpParams:
    lr = learning_rate(epoch, cfg)
    weights = [_masked(W, g, m, lr, cfg.weight_decay) for W, g, m in zip(params.weights, grads.weights, mask.weights)]
    biases = [_masked(b, g, m, lr, cfg.weight_decay) for b, g, m in zip(params.biases, grads.biases, mask.biases)]
    return MlpParams(weights, biases, params.version + 1)


def sgd_step_head(head: OutputHead, grad_W: np.ndarray, epoch: int, cfg: SgdConfig) -> OutputHead:
    return OutputHead(_masked(head.W, grad_W, None, learning_rate(epoch, cfg), cfg.weight_decay))


def _write_matrix(f: BinaryIO, A: np.ndarray) -> None:
    A = np.atleast_2d(A)
    f.write(struct.pack("<II", A.shape[0], A.shape[1]))
    f.write(np.ascontiguousarray(A, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataIOError("truncated checkpoint")
    return data


def _read_matrix(f: BinaryIO) -> np.ndarray:
    rows, cols = struct.unpack("<II", _read_exact(f, 8))
    return np.frombuffer(_read_exact(f, 8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)


def save_checkpoint(path: str, params: MlpParams, head: OutputHead, mask: Optional[FreezeMask] = None) -> None:
    """PQNET1 | u32 layers | per layer: weights, bias (each u32 rows, u32 cols, f64 row-major) | head | mask bits."""
    mask = mask or FreezeMask.all_trainable(params)
    try:
        with open(path, "wb") as f:
            f.write(NET_MAGIC)
            f.write(struct.pack("<I", params.layer_count))
            for W, b in zip(params.weights, params.biases):
                _write_matrix(f, W)
                _write_matrix(f, b.reshape(1, -1))
            _write_matrix(f, head.W)
            bits = np.concatenate([mask.layer_flat(i) for i in range(params.layer_count)])
            f.write(np.packbits(bits, bitorder="little").tobytes())
    except DataIOError:
        raise
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}")


def load_checkpoint(path: str) -> Tuple[MlpParams, OutputHead, FreezeMask]:
    try:
        with open(path, "rb") as f:
            if f.read(len(NET_MAGIC)) != NET_MAGIC:
                raise DataIOError(f"{path} is not a PQNET1 checkpoint")
            (layers,) = struct.unpack("<I", _read_exact(f, 4))
            weights, biases = [], []
            for _ in range(layers):
                weights.append(_read_matrix(f))
                biases.append(_read_matrix(f).ravel())
            head = OutputHead(_read_matrix(f))
            params = MlpParams(weights, biases)
            total = sum(W.size + b.size for W, b in zip(weights, biases))
            raw = np.frombuffer(_read_exact(f, (total + 7) // 8), dtype=np.uint8)
    except DataIOError:
        raise
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}")
    bits = np.unpackbits(raw, bitorder="little")[:total].astype(bool)
    w_masks, b_masks, pos = [], [], 0
    for W, b in zip(weights, biases):
        w_masks.append(bits[pos:pos + W.size].reshape(W.shape))
        pos += W.size
        b_masks.append(bits[pos:pos + b.size].copy())
        pos += b.size
    fraction = float(bits.mean()) if total else 1.0
    return params, head, FreezeMask(w_masks, b_masks, fraction)
