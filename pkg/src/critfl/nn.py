"""Dense MLP engine: ReLU hidden layers, softmax output, cross-entropy loss.

Parameters live in a single flat float64 vector. Layer ``l`` maps
``arch[l] -> arch[l+1]`` and occupies a weight block of shape
``(fan_in, fan_out)`` (row-major) followed by a bias block of length
``fan_out``.  Batches are passed as a feature matrix ``X`` of shape
``(n, arch[0])`` and an integer label vector ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError


class Example(NamedTuple):
    x: np.ndarray
    y: int


def validate_arch(arch: Sequence[int]) -> tuple[int, ...]:
    arch = tuple(int(w) for w in arch)
    if len(arch) < 2:
        raise ConfigError(f"arch needs at least 2 widths, got {list(arch)}")
    if any(w < 1 for w in arch):
        raise ConfigError(f"arch widths must be >= 1, got {list(arch)}")
    if arch[-1] < 2:
        raise ConfigError(f"arch must end in >= 2 classes, got {arch[-1]}")
    return arch


def n_params(arch: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(arch[:-1], arch[1:]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    arch: tuple[int, ...]

    def __post_init__(self):
        arch = validate_arch(self.arch)
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (n_params(arch),):
            raise InputError(
                f"expected {n_params(arch)} parameters for arch {list(arch)}, "
                f"got shape {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "values", values)

    @property
    def num_classes(self) -> int:
        return self.arch[-1]

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only ``(W, b)`` views, input layer first."""
        out, pos = [], 0
        for fan_in, fan_out in zip(self.arch[:-1], self.arch[1:]):
            w = self.values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = self.values[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.arch)


def zeros_model(arch: Sequence[int]) -> ModelParams:
    arch = validate_arch(arch)
    return ModelParams(np.zeros(n_params(arch)), arch)


def init_model(arch: Sequence[int], seed: int) -> ModelParams:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    arch = validate_arch(arch)
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return ModelParams(np.concatenate(parts), arch)


def stack(examples: Iterable[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Turn a list of ``Example`` into ``(X, y)`` arrays."""
    examples = list(examples)
    if not examples:
        raise InputError("empty batch")
    X = np.array([np.asarray(e.x, dtype=np.float64) for e in examples])
    y = np.array([int(e.y) for e in examples], dtype=np.int64)
    return X, y


def _check_batch(model: ModelParams, X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected features of shape (n, {model.input_dim}), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("empty batch")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise InputError(f"labels shape {y.shape} does not match {X.shape[0]} examples")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise InputError(f"labels must lie in [0, {model.num_classes})")
    return X, y


def _forward(model: ModelParams, X: np.ndarray):
    """Return (layer inputs, hidden pre-activations, logits)."""
    inputs, pre = [], []
    a = X
    layers = model.layers()
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        if i < len(layers) - 1:
            pre.append(z)
            a = np.maximum(z, 0.0)
        else:
            return inputs, pre, z
    raise AssertionError("unreachable")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: ModelParams, X) -> np.ndarray:
    X = _check_batch(model, X)
    return softmax(_forward(model, X)[2])


def forward(model: ModelParams, x) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise InputError(f"expected a feature vector of length {model.input_dim}, got shape {x.shape}")
    return predict_proba(model, x[None, :])[0]


def _ce(logits, y) -> np.ndarray:
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss(model: ModelParams, X, y) -> float:
    """Mean cross-entropy over the batch."""
    X, y = _check_batch(model, X, y)
    return float(np.mean(_ce(_forward(model, X)[2], y)))


def _backward(model, inputs, pre, dlogits) -> np.ndarray:
    layers = model.layers()
    grads = [None] * len(layers)
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = ((inputs[i].T @ delta).ravel(), delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (pre[i - 1] > 0)
    return np.concatenate([part for pair in grads for part in pair])


def loss_and_grad(model: ModelParams, X, y) -> tuple[float, np.ndarray]:
    X, y = _check_batch(model, X, y)
    inputs, pre, logits = _forward(model, X)
    n = len(y)
    probs = softmax(logits)
    value = float(np.mean(_ce(logits, y)))
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    g = _backward(model, inputs, pre, dlogits)
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite gradient")
    return value, g


def grad(model: ModelParams, X, y) -> np.ndarray:
    """Mean cross-entropy gradient over the batch, same layout as ``model.values``."""
    return loss_and_grad(model, X, y)[1]


def sgd_step(model: ModelParams, g, lr: float, weight_decay: float = 0.0) -> ModelParams:
    """``w - lr * (g + weight_decay * w)``."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be nonnegative, got {weight_decay}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != model.values.shape:
        raise InputError(f"gradient shape {g.shape} does not match parameters {model.values.shape}")
    w = model.values
    if weight_decay:
        g = g + weight_decay * w
    return model.with_values(w - lr * g)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    labels = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1)
    return np.minimum(labels, probs.shape[-1] - 1)


def sample_label(model: ModelParams, x, rng: np.random.Generator) -> int:
    """Draw one label from the model's predictive distribution at ``x``."""
    p = forward(model, x)
    return int(_draw(p[None, :], rng.random(1))[0])


def sample_labels(model: ModelParams, X, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_label`, one uniform draw per row in row order."""
    p = predict_proba(model, X)
    return _draw(p, rng.random(len(p)))


def evaluate(model: ModelParams, X, y) -> tuple[float, float]:
    """Return ``(accuracy, mean loss)``. Argmax ties go to the lowest class index."""
    X, y = _check_batch(model, X, y)
    logits = _forward(model, X)[2]
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return acc, float(np.mean(_ce(logits, y)))


def per_example_sq_grad_norms(model: ModelParams, X, labels) -> np.ndarray:
    """``||g(x_i, labels_i; w)||^2`` for each row, without forming per-example gradients.

    For a dense layer the per-example gradient is ``outer(a, delta)`` plus
    ``delta`` for the bias, whose squared norm is ``|delta|^2 (|a|^2 + 1)``.
    """
    X, labels = _check_batch(model, X, labels)
    one_hot = np.zeros((len(labels), model.num_classes))
    one_hot[np.arange(len(labels)), labels] = 1.0
    return _sq_norms(model, X, one_hot[:, None, :])[:, 0]


def expected_sq_grad_norms(model: ModelParams, X) -> np.ndarray:
    """``sum_y p(y|x_i) ||g(x_i, y; w)||^2`` for each row (exact inner expectation)."""
    X = _check_batch(model, X)
    C = model.num_classes
    targets = np.broadcast_to(np.eye(C), (len(X), C, C))
    probs = predict_proba(model, X)
    return np.einsum("nc,nc->n", probs, _sq_norms(model, X, targets))


def _sq_norms(model: ModelParams, X, targets) -> np.ndarray:
    # targets: (n, k, C) one-hot rows; returns (n, k)
    inputs, pre, logits = _forward(model, X)
    probs = softmax(logits)
    layers = model.layers()
    delta = probs[:, None, :] - targets
    total = np.zeros(delta.shape[:2])
    for i in range(len(layers) - 1, -1, -1):
        a_sq = np.einsum("nd,nd->n", inputs[i], inputs[i]) + 1.0
        total += np.einsum("nkh,nkh->nk", delta, delta) * a_sq[:, None]
        if i > 0:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)[:, None, :]
    return total
