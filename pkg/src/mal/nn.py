"""Dense ReLU classifiers: architecture specs, forward pass, loss, backprop and SGD.

Weights are stored as float32 and every computation runs in float64.
A layer ``l`` (1-based) maps ``widths[l-1]`` inputs to ``widths[l]`` outputs,
so ``W_l`` has shape ``(widths[l], widths[l-1])``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mal import rng
from mal.errors import ConfigError, DivergenceError, ShapeError

STORE_DTYPE = np.float32


class Family(str, enum.Enum):
    EQUAL = "Equal"
    WIDE_TO_NARROW = "WideToNarrow"
    NARROW_TO_WIDE = "NarrowToWide"
    PYRAMID = "Pyramid"
    INVERSE_PYRAMID = "InversePyramid"
    OTHER = "Other"


def classify_family(hidden: Sequence[int]) -> Family:
    """Classify a sequence of hidden widths by its shape.

    Plateaus are ignored, so ``[32, 64, 64, 32]`` is still a pyramid.
    """
    hidden = list(hidden)
    if not hidden:
        raise ConfigError("classify_family needs at least one hidden width")
    signs = [1 if b > a else -1 for a, b in zip(hidden, hidden[1:]) if b != a]
    if not signs:
        return Family.EQUAL
    # collapse runs: [+,+,-] -> [+,-]
    runs = [signs[0]] + [s for p, s in zip(signs, signs[1:]) if s != p]
    return {
        (-1,): Family.WIDE_TO_NARROW,
        (1,): Family.NARROW_TO_WIDE,
        (1, -1): Family.PYRAMID,
        (-1, 1): Family.INVERSE_PYRAMID,
    }.get(tuple(runs), Family.OTHER)


@dataclass(frozen=True)
class ArchSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    family: Family | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise ConfigError(f"need at least one hidden layer, got widths {list(widths)}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {list(widths)}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        family = classify_family(widths[1:-1])
        if self.family is not None and Family(self.family) != family:
            raise ConfigError(f"family {self.family} inconsistent with widths {list(widths)} ({family.value})")
        object.__setattr__(self, "family", family)

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.widths[1:-1]

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths, self.widths[1:]))

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "family": self.family.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(d["widths"]), d.get("activation", "relu"), d.get("family"))


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.learning_rate < 1.0:
            raise ConfigError(f"learning_rate must lie in (0, 1), got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Meta:
    dataset_id: str = ""
    seed: int = 0
    learning_rate: float = 0.0
    epochs: int = 0
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")
    batch_size: int = 0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "batch_size": self.batch_size,
            "notes": dict(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Meta":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def _frozen(a):
    a = np.array(a, dtype=STORE_DTYPE, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    arch: ArchSpec
    weights: tuple
    biases: tuple
    meta: Meta = field(default_factory=Meta)

    def __post_init__(self):
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        L = self.arch.num_layers
        if len(weights) != L or len(biases) != L:
            raise ShapeError(f"expected {L} weight/bias pairs, got {len(weights)}/{len(biases)}")
        for l, (w, b) in enumerate(zip(weights, biases), start=1):
            expect = (self.arch.widths[l], self.arch.widths[l - 1])
            if w.shape != expect:
                raise ShapeError(f"layer {l}: weight shape {w.shape}, expected {expect}")
            if b.shape != (expect[0],):
                raise ShapeError(f"layer {l}: bias shape {b.shape}, expected {(expect[0],)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeError(f"layer {l}: non-finite parameters")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def num_layers(self) -> int:
        return self.arch.num_layers

    def with_meta(self, **changes) -> "ModelCheckpoint":
        return replace(self, meta=replace(self.meta, **changes))

    def same_params(self, other: "ModelCheckpoint") -> bool:
        """Bit-exact parameter equality."""
        if self.arch.widths != other.arch.widths:
            return False
        return all(
            a.tobytes() == b.tobytes()
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


def init_model(arch: ArchSpec, seed: int) -> ModelCheckpoint:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
    weights, biases = [], []
    for l in range(1, arch.num_layers + 1):
        fan_in, fan_out = arch.widths[l - 1], arch.widths[l]
        bound = math.sqrt(1.0 / fan_in)
        g = rng.stream(seed, "init", l)
        weights.append(g.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelCheckpoint(arch, tuple(weights), tuple(biases), Meta(seed=seed))


def _params64(model):
    return ([np.asarray(w, dtype=np.float64) for w in model.weights],
            [np.asarray(b, dtype=np.float64) for b in model.biases])


def _forward(weights, biases, x):
    """Forward pass over float64 parameter lists; returns logits and the layer inputs."""
    acts = [x]
    h = x
    L = len(weights)
    for l, (w, b) in enumerate(zip(weights, biases), start=1):
        if h.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {l}: input has {h.shape[1]} columns, weight expects {w.shape[1]}")
        z = h @ w.T + b
        if l < L:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(model: ModelCheckpoint, inputs) -> np.ndarray:
    """Logits (N x d_L) of ``model`` on ``inputs`` (N x d_0), computed in float64."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"layer 1: inputs must be a matrix, got shape {x.shape}")
    w, b = _params64(model)
    return _forward(w, b, x)[0]


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def loss_and_accuracy(model: ModelCheckpoint, data, batch_size: int = 4096) -> tuple[float, float]:
    """Mean softmax cross-entropy and argmax accuracy over a whole dataset.

    ``np.argmax`` returns the first maximal index, so ties go to the lowest class.
    """
    if data.num_classes != model.arch.widths[-1]:
        raise ConfigError(f"dataset {data.name!r} has {data.num_classes} classes, model outputs {model.arch.widths[-1]}")
    n = len(data.labels)
    if n == 0:
        raise ConfigError("empty dataset")
    w, b = _params64(model)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = np.asarray(data.features[start:start + batch_size], dtype=np.float64)
        y = data.labels[start:start + batch_size]
        logits, _ = _forward(w, b, x)
        total_loss += -log_softmax(logits)[np.arange(len(y)), y].sum()
        correct += int((logits.argmax(axis=1) == y).sum())
    return float(total_loss / n), correct / n


def _backward(weights, biases, x, y):
    logits, acts = _forward(weights, biases, x)
    n = len(y)
    probs = np.exp(log_softmax(logits))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * (acts[i] > 0)
    return logits, gw, gb


def gradients(model: ModelCheckpoint, batch_inputs, batch_labels):
    """Gradients of the mean batch cross-entropy w.r.t. every weight and bias (float64)."""
    x = np.asarray(batch_inputs, dtype=np.float64)
    y = np.asarray(batch_labels, dtype=np.int64)
    if len(y) == 0:
        raise ShapeError("empty batch")
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ShapeError(f"batch inputs {x.shape} do not match {len(y)} labels")
    w, b = _params64(model)
    _, gw, gb = _backward(w, b, x, y)
    return gw, gb


def train_sgd(arch: ArchSpec, data, hp: Hyperparams) -> ModelCheckpoint:
    """Plain minibatch SGD from the seeded initialization.

    Batches come from a per-epoch seeded shuffle, so the result is a pure function
    of ``(arch, data, hp)``.
    """
    if arch.widths[0] != data.d_in:
        raise ConfigError(f"arch input width {arch.widths[0]} != dataset input dim {data.d_in}")
    if arch.widths[-1] != data.num_classes:
        raise ConfigError(f"arch output width {arch.widths[-1]} != dataset class count {data.num_classes}")
    init = init_model(arch, hp.seed)
    weights, biases = _params64(init)
    x_all = np.asarray(data.features, dtype=np.float64)
    y_all = np.asarray(data.labels, dtype=np.int64)
    n = len(y_all)
    lr = hp.learning_rate
    # overflow shows up as non-finite values and is reported as divergence below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(hp.epochs):
            order = rng.stream(hp.seed, "shuffle", epoch).permutation(n)
            for start in range(0, n, hp.batch_size):
                idx = order[start:start + hp.batch_size]
                logits, gw, gb = _backward(weights, biases, x_all[idx], y_all[idx])
                if not np.isfinite(logits).all():
                    raise DivergenceError(f"non-finite logits during epoch {epoch}", epoch=epoch)
                for i in range(len(weights)):
                    weights[i] -= lr * gw[i]
                    biases[i] -= lr * gb[i]
            if not all(np.isfinite(w).all() for w in weights):
                raise DivergenceError(f"non-finite weights after epoch {epoch}", epoch=epoch)
    model = ModelCheckpoint(arch, tuple(weights), tuple(biases))
    loss, acc = loss_and_accuracy(model, data)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite final loss after {hp.epochs} epochs", epoch=hp.epochs)
    meta = Meta(
        dataset_id=data.name, seed=hp.seed, learning_rate=hp.learning_rate, epochs=hp.epochs,
        final_loss=loss, final_accuracy=acc, batch_size=hp.batch_size,
        notes={"init": "uniform_fan_in", "optimizer": "sgd", "rng": "philox"},
    )
    return replace(model, meta=meta)
