"""Dense rectifier MLP with categorical cross-entropy and SGD-momentum.

Parameters are kept as float64 numpy arrays. Weight ``k`` has shape
``(widths[k+1], widths[k])`` so that a layer computes ``x @ W.T + b``.
Everything that updates parameters does so in place; use
:meth:`MlpModel.copy` to snapshot a model (e.g. an LwF teacher).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, LabelError, NumericError, ShapeError

DEFAULT_HIDDEN = (250, 125, 64)


def default_widths(input_dim: int = 512, n_classes: int = 2) -> list[int]:
    return [input_dim, *DEFAULT_HIDDEN, n_classes]


@dataclass
class MlpModel:
    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]`` (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self) -> list[str]:
        names = []
        for k in range(self.n_layers):
            names.extend((f"layer{k}.weight", f"layer{k}.bias"))
        return names

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def zeros_like_params(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params]


@dataclass
class OptimizerState:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    velocities: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate: float = 1e-2,
                  momentum: float = 0.9) -> "OptimizerState":
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(learning_rate, momentum, model.zeros_like_params())

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.learning_rate, self.momentum,
                              [v.copy() for v in self.velocities])


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] < 1:
            raise ShapeError("a batch needs at least one sample")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")


def init_model(widths: Sequence[int], seed: int) -> MlpModel:
    """He-initialised model: weights ~ N(0, 2/fan_in), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError(f"need at least an input and an output width, got {widths}")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"layer widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(widths, weights, biases)


def _as_features(model: MlpModel, x) -> np.ndarray:
    if isinstance(x, Batch):
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected features of width {model.input_dim}, got shape {x.shape}")
    return x


def forward_activations(model: MlpModel, x) -> tuple[list[np.ndarray], np.ndarray]:
    """Return the input of every layer and the output logits."""
    h = _as_features(model, x)
    acts = [h]
    last = model.n_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if k == last:
            return acts, z
        h = np.maximum(z, 0.0)
        acts.append(h)
    raise AssertionError("unreachable")


def forward(model: MlpModel, x) -> np.ndarray:
    """Logits for a batch of features (``Batch`` or ``n x d`` array)."""
    return forward_activations(model, x)[1]


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = int(labels[(labels < 0) | (labels >= n_classes)][0])
        raise LabelError(f"label {bad} outside [0, {n_classes})")
    return labels.astype(np.int64)


def cce_loss_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be n x C, got shape {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    rows = np.arange(n)
    logp = log_softmax(logits)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def backward(model: MlpModel, x, dlogits: np.ndarray,
             activations: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Gradients of the scalar loss for every parameter, in ``model.params`` order."""
    if activations is None:
        activations = forward_activations(model, x)[0]
    delta = np.asarray(dlogits, dtype=np.float64)
    n = activations[0].shape[0]
    if delta.shape != (n, model.n_classes):
        raise ShapeError(
            f"dlogits shape {delta.shape} does not match ({n}, {model.n_classes})")
    grads: list[np.ndarray] = [None] * (2 * model.n_layers)  # type: ignore[list-item]
    for k in range(model.n_layers - 1, -1, -1):
        a = activations[k]
        grads[2 * k] = delta.T @ a
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (a > 0.0)
    return grads


def per_sample_sq_grad_sum(model: MlpModel, activations: list[np.ndarray],
                           dlogits: np.ndarray) -> list[np.ndarray]:
    """Sum over samples of squared per-sample gradients.

    Row ``i`` of ``dlogits`` is treated as the logit gradient of sample ``i``
    alone. Uses ``sum_i (d_i a_i^T)^2 = (d^2)^T (a^2)`` so no per-sample
    backward pass is needed.
    """
    delta = np.asarray(dlogits, dtype=np.float64)
    out: list[np.ndarray] = [None] * (2 * model.n_layers)  # type: ignore[list-item]
    for k in range(model.n_layers - 1, -1, -1):
        a = activations[k]
        d2 = delta * delta
        out[2 * k] = d2.T @ (a * a)
        out[2 * k + 1] = d2.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (a > 0.0)
    return out


def loss_and_grads(model: MlpModel, batch: Batch) -> tuple[float, list[np.ndarray]]:
    acts, logits = forward_activations(model, batch.features)
    loss, dlogits = cce_loss_and_grad(logits, batch.labels)
    return loss, backward(model, None, dlogits, acts)


def sgd_step(model: MlpModel, grads: Sequence[np.ndarray], opt: OptimizerState) -> None:
    """In-place momentum update: ``v <- m v - lr g``; ``theta <- theta + v``."""
    params = model.params
    if len(grads) != len(params) or len(opt.velocities) != len(params):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, "
            f"{len(opt.velocities)} velocities")
    names = model.param_names()
    for name, p, g, v in zip(names, params, grads, opt.velocities):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} / velocity {v.shape} "
                             f"vs parameter {p.shape}")
        # a finite sum rules out NaN/inf entries; only scan when it is not
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            idx = np.unravel_index(np.flatnonzero(~np.isfinite(g))[0], g.shape)
            raise NumericError(f"non-finite gradient in {name} at index {tuple(map(int, idx))}")
    for p, g, v in zip(params, grads, opt.velocities):
        v *= opt.momentum
        v -= opt.learning_rate * g
        p += v


def _loss_extended(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> np.longdouble:
    h = x.astype(np.longdouble)
    last = model.n_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.astype(np.longdouble).T + b.astype(np.longdouble)
        if k != last:
            h = np.maximum(h, 0)
    h = h - h.max(axis=1, keepdims=True)
    logp = h - np.log(np.exp(h).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def finite_diff_check(model: MlpModel, batch: Batch, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Loss evaluations for the differences run in extended precision so that
    rounding noise stays well below the truncation error of the stencil.
    """
    if not eps > 0:
        raise ConfigError(f"perturbation must be positive, got {eps}")
    x = _as_features(model, batch.features)
    labels = _check_labels(batch.labels, x.shape[0], model.n_classes)
    _, analytic = loss_and_grads(model, batch)
    probe = model.copy()
    worst = 0.0
    for p, g in zip(probe.params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            up = _loss_extended(probe, x, labels)
            flat[i] = lo
            down = _loss_extended(probe, x, labels)
            flat[i] = orig
            fd = float((up - down) / (np.longdouble(hi) - np.longdouble(lo)))
            a = float(gflat[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, err)
    return worst
