"""Multinomial logistic regression and a one-hidden-layer ReLU network over flat parameters.

Parameter layout (fixed, all strategies rely on it): for each layer in order,
the weight matrix of shape ``(fan_in, fan_out)`` flattened row-major, followed
by the bias of length ``fan_out``. MLR has a single layer
``input_dim -> num_classes``; MLP2 has ``input_dim -> hidden_dim -> num_classes``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels


class ModelKind(str, enum.Enum):
    MLR = "MLR"
    MLP2 = "MLP2"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind is ModelKind.MLR and self.hidden_dim != 0:
            raise ValueError("MLR takes hidden_dim=0")
        if self.kind is ModelKind.MLP2 and self.hidden_dim < 1:
            raise ValueError("MLP2 needs hidden_dim >= 1")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        if self.kind is ModelKind.MLR:
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def unflatten(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``[(W, b), ...]`` into ``values``; writes go through."""
        out, pos = [], 0
        for fan_in, fan_out in self.layer_dims:
            w = values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            out.append((w, values[pos:pos + fan_out]))
            pos += fan_out
        return out


@dataclass
class ParamVector:
    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.param_count,):
            raise ValueError(
                f"expected {self.spec.param_count} parameters for {self.spec}, got shape {self.values.shape}"
            )

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.spec)

    def __len__(self):
        return self.values.shape[0]


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"row count mismatch: {self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> Batch:
        return Batch(self.inputs[idx], self.labels[idx])


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases zero."""
    values = np.zeros(spec.param_count)
    for w, _ in spec.unflatten(values):
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return ParamVector(values, spec)


def _check_dims(spec: ModelSpec, x: np.ndarray, y: np.ndarray):
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match model input_dim {spec.input_dim}")
    if y.size and y.max() >= spec.num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {spec.num_classes} classes")


def forward(spec: ModelSpec, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs."""
    layers = spec.unflatten(values)
    if spec.kind is ModelKind.MLR:
        (w, b), = layers
        return x @ w + b
    (w1, b1), (w2, b2) = layers
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def loss_grad_array(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray,
                    grad: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its exact gradient (same layout as ``values``).

    Array-level twin of :func:`loss_and_grad` for the training loops; ``grad``
    is overwritten when given.
    """
    if grad is None:
        grad = np.empty_like(values)
    layers = spec.unflatten(values)
    glayers = spec.unflatten(grad)
    if spec.kind is ModelKind.MLR:
        (w, b), = layers
        (gw, gb), = glayers
        z = x @ w
        z += b
        loss = kernels.softmax_xent(z, y)
        np.dot(x.T, z, out=gw)
        z.sum(axis=0, out=gb)
        return loss, grad
    (w1, b1), (w2, b2) = layers
    (gw1, gb1), (gw2, gb2) = glayers
    h = x @ w1
    h += b1
    a = np.maximum(h, 0.0)
    z = a @ w2
    z += b2
    loss = kernels.softmax_xent(z, y)
    np.dot(a.T, z, out=gw2)
    z.sum(axis=0, out=gb2)
    da = z @ w2.T
    # ReLU subgradient at exactly 0 is taken as 0
    da[h <= 0.0] = 0.0
    np.dot(x.T, da, out=gw1)
    da.sum(axis=0, out=gb1)
    return loss, grad


def loss_and_grad(params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    _check_dims(params.spec, batch.inputs, batch.labels)
    loss, grad = loss_grad_array(params.spec, params.values, batch.inputs, batch.labels)
    return loss, ParamVector(grad, params.spec)


def evaluate_array(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    z = forward(spec, values, x)
    # argmax returns the first maximum: ties go to the lowest class index
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    z = z - z.max(axis=1, keepdims=True)
    logp = z[np.arange(len(y)), y] - np.log(np.exp(z).sum(axis=1))
    return acc, float(-logp.mean())


def evaluate(params: ParamVector, data: Batch) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over ``data``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on empty data")
    _check_dims(params.spec, data.inputs, data.labels)
    return evaluate_array(params.spec, params.values, data.inputs, data.labels)
