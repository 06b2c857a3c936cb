"""Dense network with a feature extractor / classifier split.

The model is ``f(x) = g(h(x, phi), theta)``: ``h`` is a stack of fully
connected layers (identity or ReLU between them) producing the semantic
feature ``z``, and ``g`` is a single linear layer producing class scores.
Forward and backward passes are written out by hand in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IDENTITY = "identity"
RELU = "relu"
ACTIVATIONS = (IDENTITY, RELU)


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the model."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, round: int | None = None, group: int | None = None,
                 client: int | None = None):
        self.round = round
        self.group = group
        self.client = client
        ctx = ", ".join(
            f"{k}={v}" for k, v in (("round", round), ("group", group), ("client", client)) if v is not None
        )
        super().__init__(f"{message} ({ctx})" if ctx else message)

    def with_context(self, **ctx) -> "TrainingDiverged":
        merged = {"round": self.round, "group": self.group, "client": self.client}
        merged.update({k: v for k, v in ctx.items() if v is not None})
        base = str(self).split(" (")[0]
        return TrainingDiverged(base, **merged)


@dataclass
class LinearLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weights.copy(), self.bias.copy())


@dataclass
class DenseModel:
    extractor: list[LinearLayer]
    classifier: LinearLayer
    activation: str = IDENTITY

    def __post_init__(self):
        if not self.extractor:
            raise ShapeError("the extractor needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.extractor, self.extractor[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.extractor[-1].out_dim != self.classifier.in_dim:
            raise ShapeError("extractor output does not match classifier input")

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.classifier.in_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    def layers(self) -> list[LinearLayer]:
        return [*self.extractor, self.classifier]

    def copy(self) -> "DenseModel":
        return DenseModel([l.copy() for l in self.extractor], self.classifier.copy(), self.activation)


def init_model(dims: Sequence[int], num_classes: int, rng: np.random.Generator,
               activation: str = IDENTITY) -> DenseModel:
    """Build a model with extractor widths ``dims`` (input first, feature last).

    Weights are uniform in ``[-1/sqrt(in), 1/sqrt(in)]``; biases start at zero.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ShapeError("need at least an input and a feature dimension")

    def layer(i: int, o: int) -> LinearLayer:
        bound = 1.0 / math.sqrt(i)
        return LinearLayer(rng.uniform(-bound, bound, size=(i, o)), np.zeros(o))

    extractor = [layer(i, o) for i, o in zip(dims, dims[1:])]
    return DenseModel(extractor, layer(dims[-1], num_classes), activation)


# ---------------------------------------------------------------------------
# parameter vectors

@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(compare=False)

    def __len__(self) -> int:
        return self.values.size

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def classifier_size(self) -> int:
        return sum(int(np.prod(s)) for n, s in self.layout if n.startswith("classifier."))

    @property
    def extractor_size(self) -> int:
        return len(self) - self.classifier_size

    def extractor_part(self) -> np.ndarray:
        return self.values[: self.extractor_size]

    def classifier_part(self) -> np.ndarray:
        return self.values[self.extractor_size:]

    def with_parts(self, extractor: np.ndarray | None = None,
                   classifier: np.ndarray | None = None) -> "ParamVector":
        vals = self.values.copy()
        if extractor is not None:
            vals[: self.extractor_size] = extractor
        if classifier is not None:
            vals[self.extractor_size:] = classifier
        return ParamVector(vals, self.layout)


def model_layout(model: DenseModel) -> tuple[tuple[str, tuple[int, ...]], ...]:
    entries = []
    for i, layer in enumerate(model.extractor):
        entries.append((f"extractor.{i}.weight", layer.weights.shape))
        entries.append((f"extractor.{i}.bias", layer.bias.shape))
    entries.append(("classifier.weight", model.classifier.weights.shape))
    entries.append(("classifier.bias", model.classifier.bias.shape))
    return tuple(entries)


def flatten(model: DenseModel) -> ParamVector:
    parts = []
    for layer in model.layers():
        parts.append(layer.weights.ravel())
        parts.append(layer.bias.ravel())
    return ParamVector(np.concatenate(parts), model_layout(model))


def unflatten(pv: ParamVector, activation: str = IDENTITY) -> DenseModel:
    sl = pv.slices()
    n_ext = sum(1 for name, _ in pv.layout if name.endswith(".weight")) - 1
    shapes = dict(pv.layout)

    def get(name: str) -> np.ndarray:
        return pv.values[sl[name]].reshape(shapes[name]).copy()

    extractor = [LinearLayer(get(f"extractor.{i}.weight"), get(f"extractor.{i}.bias")) for i in range(n_ext)]
    classifier = LinearLayer(get("classifier.weight"), get("classifier.bias"))
    return DenseModel(extractor, classifier, activation)


def average_params(vectors: Sequence[ParamVector]) -> ParamVector:
    """Element-wise arithmetic mean of parameter vectors with identical layout."""
    if not vectors:
        raise ValueError("need at least one parameter vector")
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise ShapeError("parameter layouts differ")
    total = np.zeros_like(vectors[0].values)
    for v in vectors:  # fixed summation order
        total += v.values
    return ParamVector(total / len(vectors), layout)


def param_counts(model: DenseModel) -> tuple[int, int]:
    """Return ``(total, classifier)`` parameter counts, biases included."""
    classifier = model.classifier.size
    return sum(l.size for l in model.extractor) + classifier, classifier


# ---------------------------------------------------------------------------
# forward / backward

def _act(a: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(a, 0.0) if activation == RELU else a


def _check_width(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width:
        raise ShapeError(f"{what} has width {x.shape[-1]}, expected {width}")
    return x


def forward_features(model: DenseModel, x: np.ndarray) -> np.ndarray:
    """Semantic feature z = h(x, phi). Accepts one vector or a batch of rows."""
    h = _check_width(x, model.input_dim, "input")
    last = len(model.extractor) - 1
    for i, layer in enumerate(model.extractor):
        h = h @ layer.weights + layer.bias
        if i < last:
            h = _act(h, model.activation)
    return h


def forward_logits(model: DenseModel, z: np.ndarray) -> np.ndarray:
    z = _check_width(z, model.feature_dim, "feature")
    return z @ model.classifier.weights + model.classifier.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean natural-log softmax cross-entropy."""
    logits = np.atleast_2d(logits)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    return float(np.mean(logz - shifted[np.arange(len(labels)), labels]))


def loss_and_grads(model: DenseModel, x: np.ndarray, y: np.ndarray,
                   features_input: bool = False) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean cross-entropy over the rows of ``x`` and its gradient per layer.

    Gradients are returned as ``(dW, db)`` pairs in ``model.layers()`` order.
    With ``features_input`` the rows are semantic features and only the
    classifier gradient is produced.
    """
    y = np.asarray(y, dtype=np.int64)
    if features_input:
        z = _check_width(x, model.feature_dim, "feature")
        pre, post = [], []
    else:
        h = _check_width(x, model.input_dim, "input")
        pre, post = [], [h]
        last = len(model.extractor) - 1
        for i, layer in enumerate(model.extractor):
            a = h @ layer.weights + layer.bias
            pre.append(a)
            h = _act(a, model.activation) if i < last else a
            post.append(h)
        z = h
    logits = z @ model.classifier.weights + model.classifier.bias
    n = len(y)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total[:, 0]) - shifted[rows, y]))

    delta = e / total
    delta[rows, y] -= 1.0
    delta /= n
    classifier_grad = (z.T @ delta, delta.sum(axis=0))
    if features_input:
        return loss, [classifier_grad]

    ext_grads = []
    d = delta @ model.classifier.weights.T
    for i in range(len(model.extractor) - 1, -1, -1):
        if i < len(model.extractor) - 1 and model.activation == RELU:
            d = d * (pre[i] > 0)
        ext_grads.append((post[i].T @ d, d.sum(axis=0)))
        if i > 0:
            d = d @ model.extractor[i].weights.T
    return loss, ext_grads[::-1] + [classifier_grad]


def _sgd_epoch(model: DenseModel, x: np.ndarray, y: np.ndarray, lr: float, minibatch: int,
               rng: np.random.Generator, freeze_extractor: bool, features_input: bool) -> DenseModel:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot train on an empty batch")
    if lr < 0 or minibatch < 1:
        raise ValueError("need lr >= 0 and minibatch >= 1")
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ValueError("label out of range")
    out = model.copy()
    order = rng.permutation(len(y))
    classifier_only = freeze_extractor or features_input
    for start in range(0, len(y), minibatch):
        idx = order[start:start + minibatch]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(out, x[idx], y[idx], features_input=features_input)
        if not math.isfinite(loss):
            raise TrainingDiverged("non-finite training loss")
        if lr == 0:
            continue
        gw, gb = grads[-1]
        out.classifier.weights -= lr * gw
        out.classifier.bias -= lr * gb
        if not classifier_only:
            for layer, (gw, gb) in zip(out.extractor, grads[:-1]):
                layer.weights -= lr * gw
                layer.bias -= lr * gb
    return out


def train_one_epoch(model: DenseModel, x: np.ndarray, y: np.ndarray, lr: float, minibatch: int,
                    rng: np.random.Generator, freeze_extractor: bool = False) -> DenseModel:
    """One shuffled pass of minibatch SGD on raw inputs; returns a new model."""
    return _sgd_epoch(model, x, y, lr, minibatch, rng, freeze_extractor, features_input=False)


def train_classifier_epoch(model: DenseModel, z: np.ndarray, y: np.ndarray, lr: float,
                           minibatch: int, rng: np.random.Generator) -> DenseModel:
    """One SGD pass over semantic features; the extractor is left untouched."""
    return _sgd_epoch(model, z, y, lr, minibatch, rng, True, features_input=True)


def extractor_product(model: DenseModel) -> tuple[np.ndarray, np.ndarray]:
    """Collapse an identity-activation extractor into one affine map ``x @ Phi + c``."""
    if model.activation != IDENTITY and len(model.extractor) > 1:
        raise ValueError("only identity-activation extractors are affine")
    phi = np.eye(model.input_dim)
    c = np.zeros(model.input_dim)
    for layer in model.extractor:
        phi = phi @ layer.weights
        c = c @ layer.weights + layer.bias
    return phi, c
