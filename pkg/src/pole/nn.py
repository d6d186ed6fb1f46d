"""Feed-forward ReLU network with softmax cross-entropy, trained by plain SGD.

Parameters are a list of ``(W, b)`` pairs with ``W`` shaped (out, in). The
SML is not a trainable layer: it is applied upstream and the network sees
its (standardized) outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Reader, Writer
from .sml import SmlWeights

Params = list[tuple[np.ndarray, np.ndarray]]


class NumericalDivergence(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    required_accuracy: float
    time_limit: float
    lr: float = 0.05
    batch_size: int = 32
    activation: str = "relu"
    loss: str = "softmax_xent"
    metric: str = "accuracy"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError("a model needs at least an input and an output layer")
        if not 0 <= self.required_accuracy <= 1:
            raise ValueError("required accuracy must lie in [0, 1]")
        if self.activation != "relu" or self.loss != "softmax_xent" or self.metric != "accuracy":
            raise ValueError("only relu / softmax cross-entropy / accuracy models are supported")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def encode(self, w: Writer) -> None:
        w.ints(self.layer_sizes).float(self.required_accuracy).float(self.time_limit)
        w.float(self.lr).int(self.batch_size).str(self.activation).str(self.loss).str(self.metric)

    @classmethod
    def decode(cls, r: Reader) -> ModelSpec:
        sizes = tuple(r.ints())
        return cls(sizes, r.float(), r.float(), r.float(), r.int(), r.str(), r.str(), r.str())


def init_model(spec: ModelSpec, seed, scale: float | None = None) -> Params:
    """Glorot-uniform weights, zero biases. ``scale`` overrides the uniform half-width."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out)) if scale is None else scale
        params.append((rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return params


def forward(params: Params, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer; the last entry holds the logits."""
    acts = [x]
    for i, (w, b) in enumerate(params):
        z = acts[-1] @ w.T + b
        acts.append(np.maximum(z, 0.0) if i < len(params) - 1 else z)
    return acts


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    acts = forward(params, x)
    probs = softmax(acts[-1])
    n = len(y)
    loss = -np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None)))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: Params = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ params[i][0]) * (acts[i] > 0)
    return float(loss), grads


def train_step(params: Params, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[Params, float]:
    if len(y) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(params, x, y)
    if not np.isfinite(loss):
        raise NumericalDivergence(f"loss became {loss}")
    return [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params, grads)], loss


def predict(params: Params, x: np.ndarray) -> np.ndarray:
    # argmax returns the lowest index among tied logits
    return np.argmax(forward(params, x)[-1], axis=1)


def evaluate(params: Params, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(params, x) == y))


@dataclass(frozen=True)
class Standardizer:
    """Fixed per-feature shift and scale fitted on the training features."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Standardizer:
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> Standardizer:
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


class BatchSampler:
    """Reshuffles every epoch from its own seeded stream; yields index batches."""

    def __init__(self, n: int, batch_size: int, seed) -> None:
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._perm = self.rng.permutation(n)
        self._pos = 0
        self.epoch = 0

    def next(self) -> np.ndarray:
        if self._pos >= self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.n // self.batch_size)


@dataclass(eq=False)
class ModelSolution:
    """A trained network bound to the SML it was trained behind."""

    spec_id: str
    sml: SmlWeights
    params: Params
    norm: Standardizer
    train_accuracy: float = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        return predict(self.params, self.norm(features))

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return evaluate(self.params, self.norm(features), labels)

    def with_sml(self, sml: SmlWeights) -> ModelSolution:
        return ModelSolution(self.spec_id, sml, self.params, self.norm, self.train_accuracy)

    def encode(self, w: Writer) -> None:
        w.str(self.spec_id)
        self.sml.encode(w)
        w.float(self.train_accuracy)
        w.array(self.norm.mean).array(self.norm.scale)
        w.count(len(self.params))
        for wt, b in self.params:
            w.array(wt).array(b)

    @classmethod
    def decode(cls, r: Reader) -> ModelSolution:
        spec_id = r.str()
        sml = SmlWeights.decode(r)
        acc = r.float()
        norm = Standardizer(r.array(), r.array())
        params = [(r.array(), r.array()) for _ in range(r.count())]
        return cls(spec_id, sml, params, norm, acc)

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()
