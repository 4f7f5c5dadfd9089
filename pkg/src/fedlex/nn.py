"""Small fully connected networks with exact backprop on flat parameter vectors.

Everything the federated protocol moves around (weights, deltas, gradients,
guidance values) is a :class:`ParamVector`: one contiguous float64 array plus a
layout describing which slice belongs to which layer tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when arrays or layouts do not line up."""


class InvalidArchitecture(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Raised when backward is handed a cache built from other parameters."""


# (name, offset, shape)
LayoutEntry = tuple[str, int, tuple[int, ...]]
Layout = tuple[LayoutEntry, ...]


def layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in layout)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, int(o), tuple(s)) for n, o, s in self.layout))
        if values.size != layout_size(self.layout):
            raise ShapeError(
                f"vector has {values.size} entries but layout describes {layout_size(self.layout)}"
            )

    def __len__(self) -> int:
        return self.values.size

    @property
    def nbytes(self) -> int:
        return self.values.size * 8

    def tensor(self, name: str) -> np.ndarray:
        """Read-only view of one layer tensor."""
        for n, offset, shape in self.layout:
            if n == name:
                return self.values[offset : offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: self.tensor(n) for n, _, _ in self.layout}

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values, self.layout)


def _check_layouts(*vecs: ParamVector) -> None:
    first = vecs[0].layout
    for v in vecs[1:]:
        if v.layout != first:
            raise ShapeError("parameter layouts differ")


def add(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_layouts(a, b)
    return ParamVector(a.values + b.values, a.layout)


def sub(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_layouts(a, b)
    return ParamVector(a.values - b.values, a.layout)


def scale(a: ParamVector, k: float) -> ParamVector:
    return ParamVector(a.values * k, a.layout)


def hadamard(a: ParamVector, b: ParamVector) -> ParamVector:
    _check_layouts(a, b)
    return ParamVector(a.values * b.values, a.layout)


def variance_across(vecs: Sequence[ParamVector]) -> float:
    """Population variance of each coordinate across vectors, averaged over coordinates."""
    if len(vecs) == 0:
        raise ValueError("variance_across needs at least one vector")
    _check_layouts(*vecs)
    stacked = np.stack([v.values for v in vecs])
    return float(np.mean(np.var(stacked, axis=0)))


def make_layout(layer_sizes: Sequence[int]) -> Layout:
    entries = []
    offset = 0
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        entries.append((f"W{i}", offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        entries.append((f"b{i}", offset, (fan_out,)))
        offset += fan_out
    return tuple(entries)


def _validate_sizes(layer_sizes: Sequence[int]) -> list[int]:
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise InvalidArchitecture(f"need at least input and output sizes, got {sizes}")
    if any(int(s) != s or s < 1 for s in sizes):
        raise InvalidArchitecture(f"layer sizes must be positive integers, got {sizes}")
    return [int(s) for s in sizes]


def init_params(layer_sizes: Sequence[int], seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = _validate_sizes(layer_sizes)
    layout = make_layout(sizes)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout_size(layout))
    for name, offset, shape in layout:
        if name.startswith("W"):
            bound = 1.0 / np.sqrt(shape[0])
            n = shape[0] * shape[1]
            values[offset : offset + n] = rng.uniform(-bound, bound, size=n)
    return ParamVector(values, layout)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if np.any(y < 0):
            raise ShapeError("labels must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


_ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    params: ParamVector = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.layer_sizes = tuple(_validate_sizes(self.layer_sizes))
        if self.activation not in _ACTIVATIONS:
            raise InvalidArchitecture(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")
        if self.params is None:
            self.params = ParamVector(np.zeros(layout_size(make_layout(self.layer_sizes))),
                                      make_layout(self.layer_sizes))
        elif self.params.layout != make_layout(self.layer_sizes):
            raise ShapeError("params layout does not match layer sizes")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], seed: int, activation: str = "relu") -> "MlpModel":
        return cls(tuple(layer_sizes), activation, init_params(layer_sizes, seed))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def with_params(self, params: ParamVector) -> "MlpModel":
        return MlpModel(self.layer_sizes, self.activation, params)

    def scores(self, inputs: np.ndarray) -> np.ndarray:
        """Raw output scores (logits), n x classes."""
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layer_sizes[0]:
            raise ShapeError(f"expected inputs of width {self.layer_sizes[0]}, got shape {h.shape}")
        for i in range(self.n_layers):
            h = h @ self.params.tensor(f"W{i}") + self.params.tensor(f"b{i}")
            if i < self.n_layers - 1:
                h = _act(h, self.activation)
        return h

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(inputs), axis=1)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class _Cache:
    params: ParamVector
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    probs: np.ndarray
    labels: np.ndarray


def forward_loss(model: MlpModel, batch: Batch) -> tuple[float, _Cache]:
    """Mean softmax cross-entropy of the batch, plus what backward needs."""
    x = batch.inputs
    if x.shape[1] != model.layer_sizes[0]:
        raise ShapeError(f"batch width {x.shape[1]} != model input size {model.layer_sizes[0]}")
    if np.any(batch.labels >= model.n_classes):
        raise ShapeError(f"label out of range for {model.n_classes} classes")
    p = model.params
    pre, post = [], [x]
    h = x
    for i in range(model.n_layers):
        z = h @ p.tensor(f"W{i}") + p.tensor(f"b{i}")
        pre.append(z)
        if i < model.n_layers - 1:
            h = _act(z, model.activation)
            post.append(h)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    n = len(batch)
    log_p_true = shifted[np.arange(n), batch.labels] - log_z
    loss = float(-np.mean(log_p_true))
    probs = np.exp(shifted - log_z[:, None])
    return loss, _Cache(p, x, pre, post, probs, batch.labels)


def backward(model: MlpModel, cache: _Cache) -> ParamVector:
    """Gradient of the batch-mean loss, laid out like ``model.params``."""
    if cache.params is not model.params:
        raise StaleCacheError("cache was built for different parameters; rerun forward_loss")
    p = model.params
    n = cache.labels.shape[0]
    grad = np.empty(len(p))
    delta = cache.probs.copy()
    delta[np.arange(n), cache.labels] -= 1.0
    delta /= n
    entries = {name: (offset, shape) for name, offset, shape in p.layout}
    for i in reversed(range(model.n_layers)):
        a_prev = cache.post[i]
        w_off, w_shape = entries[f"W{i}"]
        b_off, _ = entries[f"b{i}"]
        grad[w_off : w_off + w_shape[0] * w_shape[1]] = (a_prev.T @ delta).reshape(-1)
        grad[b_off : b_off + w_shape[1]] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ p.tensor(f"W{i}").T
            z = cache.pre[i - 1]
            if model.activation == "relu":
                delta = delta * (z > 0)
            else:
                delta = delta * (1.0 - np.tanh(z) ** 2)
    return ParamVector(grad, p.layout)


def loss_and_grad(model: MlpModel, batch: Batch) -> tuple[float, ParamVector]:
    loss, cache = forward_loss(model, batch)
    return loss, backward(model, cache)


def finite_diff_grad(model: MlpModel, batch: Batch, epsilon: float = 1e-5) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = model.params.values
    grad = np.empty_like(base)
    for j in range(base.size):
        bumped = base.copy()
        bumped[j] = base[j] + epsilon
        up, _ = forward_loss(model.with_params(model.params.with_values(bumped)), batch)
        bumped[j] = base[j] - epsilon
        down, _ = forward_loss(model.with_params(model.params.with_values(bumped)), batch)
        grad[j] = (up - down) / (2.0 * epsilon)
    return ParamVector(grad, model.params.layout)


def accuracy(model: MlpModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(100.0 * np.mean(model.predict(inputs) == labels))
