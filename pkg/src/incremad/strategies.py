"""Continual-learning strategies driving one shared MLP through a stream of experiences.

Supported kinds: ``naive`` (plain fine-tuning), ``joint`` (offline upper bound),
``lwf`` (distillation from a frozen copy of the previous model), ``ewc``
(online diagonal-Fisher penalty), ``si`` (synaptic intelligence) and ``slda``
(streaming LDA on the input features; the MLP is left untouched).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import kernels
from .errors import ConfigError, LabelError, ShapeError, StateError, StreamError
from .nn import (
    MlpModel,
    OptimizerState,
    backward,
    cce_loss_and_grad,
    forward,
    forward_activations,
    log_softmax,
    per_sample_sq_grad_sum,
    sgd_step,
    softmax,
)
from .stream import Experience

KINDS = ("naive", "joint", "lwf", "ewc", "si", "slda")


@dataclass
class StrategyConfig:
    kind: str = "naive"
    lambda_lwf: float = 0.0
    distill_temperature: float = 2.0
    lambda_ewc: float = 100.0
    si_c: float = 0.1
    si_xi: float = 0.1
    slda_shrinkage: float = 1e-4
    epochs_per_experience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if min(self.lambda_lwf, self.lambda_ewc, self.si_c) < 0:
            raise ConfigError("regularisation strengths must be non-negative")
        if self.distill_temperature <= 0:
            raise ConfigError("distillation temperature must be positive")
        if self.si_xi <= 0:
            raise ConfigError("SI damping must be positive")
        if not 0 < self.slda_shrinkage < 1:
            raise ConfigError("SLDA shrinkage must lie in (0, 1)")
        if self.epochs_per_experience < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")

    def with_(self, **changes) -> "StrategyConfig":
        return replace(self, **changes)


@dataclass
class SldaState:
    """Per-class running means and a shared streaming covariance."""

    means: np.ndarray
    counts: np.ndarray
    cov: np.ndarray
    total: float = 0.0

    @classmethod
    def empty(cls, n_classes: int, dim: int) -> "SldaState":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes), np.zeros((dim, dim)))

    def copy(self) -> "SldaState":
        return SldaState(self.means.copy(), self.counts.copy(), self.cov.copy(), self.total)

    def same_as(self, other: "SldaState") -> bool:
        return (self.total == other.total
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.cov, other.cov))

    def fit(self, features, labels) -> None:
        x = np.ascontiguousarray(np.atleast_2d(features), dtype=np.float64)
        y = np.ascontiguousarray(np.asarray(labels).reshape(-1), dtype=np.int64)
        if x.shape[1] != self.means.shape[1] or x.shape[0] != y.shape[0]:
            raise ShapeError(f"features {x.shape} / labels {y.shape} do not fit "
                             f"SLDA of dim {self.means.shape[1]}")
        if y.size and (y.min() < 0 or y.max() >= self.means.shape[0]):
            raise LabelError(f"label outside [0, {self.means.shape[0]})")
        self.total = kernels.slda_fit_batch(self.means, self.counts, self.cov,
                                            float(self.total), x, y)


@dataclass
class StrategyState:
    kind: str
    teacher: MlpModel | None = None
    fisher: list[np.ndarray] | None = None
    anchor: list[np.ndarray] | None = None
    omega_path: list[np.ndarray] | None = None
    omega: list[np.ndarray] | None = None
    slda: SldaState | None = None
    experiences_seen: int = 0


def init_state(cfg: StrategyConfig, model: MlpModel) -> StrategyState:
    state = StrategyState(cfg.kind)
    if cfg.kind == "si":
        state.omega_path = model.zeros_like_params()
    elif cfg.kind == "slda":
        state.slda = SldaState.empty(model.n_classes, model.input_dim)
    return state


def lwf_loss(student_logits, teacher_logits, labels, lam: float,
             temperature: float) -> tuple[float, np.ndarray]:
    """CCE plus ``lam * T^2 * KL(teacher_T || student_T)``, averaged over the batch."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"student {student_logits.shape} vs teacher {teacher_logits.shape}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    loss, grad = cce_loss_and_grad(student_logits, labels)
    if lam == 0:
        return loss, grad
    n = student_logits.shape[0]
    t = temperature
    log_pt = log_softmax(teacher_logits, t)
    log_ps = log_softmax(student_logits, t)
    pt = np.exp(log_pt)
    kl = float(np.sum(pt * (log_pt - log_ps)) / n)
    # d/dz [T^2 KL] = T (p_student - p_teacher) per sample
    grad = grad + (lam * t / n) * (np.exp(log_ps) - pt)
    return loss + lam * t * t * kl, grad


def _require_samples(exp) -> tuple[np.ndarray, np.ndarray]:
    if exp is None or len(exp.labels) == 0:
        raise StreamError("experience is empty")
    return exp.features, exp.labels


def estimate_fisher(model: MlpModel, exp) -> list[np.ndarray]:
    """Diagonal Fisher, expectation taken over the model's own predictive distribution."""
    x, _ = _require_samples(exp)
    acts, logits = forward_activations(model, x)
    p = softmax(logits)
    n, n_classes = p.shape
    fisher = model.zeros_like_params()
    for c in range(n_classes):
        dlog = -p.copy()
        dlog[:, c] += 1.0
        dlog *= np.sqrt(p[:, c:c + 1])
        for f, s in zip(fisher, per_sample_sq_grad_sum(model, acts, dlog)):
            f += s
    for f in fisher:
        f /= n
    return fisher


def ewc_penalty(model: MlpModel, state: StrategyState,
                lambda_ewc: float) -> tuple[float, list[np.ndarray]]:
    if state.fisher is None or state.anchor is None:
        raise StateError("EWC penalty needs a Fisher estimate and an anchor")
    penalty, grads = 0.0, []
    for p, f, a in zip(model.params, state.fisher, state.anchor):
        diff = p - a
        penalty += float(np.sum(f * diff * diff))
        grads.append(lambda_ewc * f * diff)
    return 0.5 * lambda_ewc * penalty, grads


def si_penalty(model: MlpModel, state: StrategyState, c: float) -> tuple[float, list[np.ndarray]]:
    if state.omega is None or state.anchor is None:
        raise StateError("SI penalty needs consolidated importances and an anchor")
    penalty, grads = 0.0, []
    for p, w, a in zip(model.params, state.omega, state.anchor):
        diff = p - a
        penalty += float(np.sum(w * diff * diff))
        grads.append(2.0 * c * w * diff)
    return c * penalty, grads


def si_accumulate(state: StrategyState, grads, deltas) -> None:
    """Path integral of the loss decrease: ``path -= g * dtheta``."""
    if state.omega_path is None:
        raise StateError("SI state has no path accumulator")
    for acc, g, d in zip(state.omega_path, grads, deltas):
        acc -= g * d


def si_consolidate(state: StrategyState, theta_end, theta_start, xi: float) -> None:
    """Fold the path integral into the importances and move the anchor.

    Negative path contributions are clamped to zero so importances never shrink.
    """
    if xi <= 0:
        raise ConfigError(f"SI damping must be positive, got {xi}")
    if state.omega_path is None:
        raise StateError("SI state has no path accumulator")
    if state.omega is None:
        state.omega = [np.zeros_like(p) for p in theta_end]
    for w, acc, end, start in zip(state.omega, state.omega_path, theta_end, theta_start):
        moved = end - start
        w += np.maximum(acc, 0.0) / (moved * moved + xi)
        acc[...] = 0.0
    state.anchor = [p.copy() for p in theta_end]


def slda_fit_sample(state: SldaState, feature, label) -> SldaState:
    state.fit(np.asarray(feature, dtype=np.float64)[None, :], [int(label)])
    return state


def slda_predict(state: SldaState, features, shrinkage: float = 1e-4) -> np.ndarray:
    """Linear discriminant scores ``x . w_c + b_c`` for every class.

    Classes that have not been seen score ``-inf``.
    """
    if state.total == 0:
        raise StateError("SLDA has not seen any sample")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    d = state.means.shape[1]
    if x.shape[1] != d:
        raise ShapeError(f"expected features of width {d}, got {x.shape}")
    shrunk = (1.0 - shrinkage) * state.cov + shrinkage * np.eye(d)
    w = np.linalg.solve(shrunk, state.means.T).T
    b = -0.5 * np.sum(state.means * w, axis=1)
    scores = x @ w.T + b
    scores[:, state.counts == 0] = -np.inf
    return scores


def _train_epochs(model, opt, x, y, cfg: StrategyConfig, rng, state: StrategyState):
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    teacher = state.teacher if cfg.kind == "lwf" and cfg.lambda_lwf > 0 else None
    use_ewc = cfg.kind == "ewc" and state.fisher is not None and cfg.lambda_ewc > 0
    use_si = cfg.kind == "si" and state.omega is not None and cfg.si_c > 0
    track_si = cfg.kind == "si"
    # the teacher is frozen for the whole experience, so its logits are too
    soft_targets = forward(teacher, x) if teacher is not None else None
    for _ in range(cfg.epochs_per_experience):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            xb, yb = x[idx], y[idx]
            acts, logits = forward_activations(model, xb)
            if soft_targets is not None:
                _, dlog = lwf_loss(logits, soft_targets[idx], yb,
                                   cfg.lambda_lwf, cfg.distill_temperature)
            else:
                _, dlog = cce_loss_and_grad(logits, yb)
            task_grads = backward(model, None, dlog, acts)
            grads = task_grads
            if use_ewc:
                _, pen = ewc_penalty(model, state, cfg.lambda_ewc)
                grads = [g + q for g, q in zip(grads, pen)]
            if use_si:
                _, pen = si_penalty(model, state, cfg.si_c)
                grads = [g + q for g, q in zip(grads, pen)]
            if track_si:
                before = [p.copy() for p in model.params]
            sgd_step(model, grads, opt)
            if track_si:
                si_accumulate(state, task_grads,
                              [p - b for p, b in zip(model.params, before)])


def train_experience(state: StrategyState, model: MlpModel, opt: OptimizerState,
                     exp: Experience, cfg: StrategyConfig, seed: int):
    """Train on one experience and update the strategy memory at its end.

    Mini-batch order depends only on ``(seed, exp.index)``. Returns
    ``(model, opt, state)``; all three are updated in place.
    """
    x, y = _require_samples(exp)
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"experience {exp.index}: features of width {x.shape[1]}, "
                         f"model expects {model.input_dim}")
    if state.kind != cfg.kind:
        raise StateError(f"state belongs to {state.kind!r}, config is {cfg.kind!r}")

    if cfg.kind == "slda":
        state.slda.fit(x, y)
        state.experiences_seen += 1
        return model, opt, state

    theta_start = [p.copy() for p in model.params] if cfg.kind == "si" else None
    rng = np.random.default_rng([seed, exp.index])
    _train_epochs(model, opt, x, y, cfg, rng, state)

    if cfg.kind == "lwf":
        state.teacher = model.copy()
    elif cfg.kind == "ewc":
        fisher = estimate_fisher(model, exp)
        if state.fisher is None:
            state.fisher = fisher
        else:
            for acc, f in zip(state.fisher, fisher):
                acc += f
        state.anchor = [p.copy() for p in model.params]
    elif cfg.kind == "si":
        si_consolidate(state, model.params, theta_start, cfg.si_xi)
    state.experiences_seen += 1
    return model, opt, state


def joint_train(model: MlpModel, opt: OptimizerState, all_data, cfg: StrategyConfig,
                seed: int) -> MlpModel:
    """Offline training on all data at once (shuffles as experience 1 would)."""
    if all_data is None or len(all_data.labels) == 0:
        raise StreamError("joint training needs data")
    exp = Experience(1, all_data.features, all_data.labels, -1, all_data.n_classes, "joint")
    plain = cfg.with_(kind="naive")
    train_experience(StrategyState("naive"), model, opt, exp, plain, seed)
    return model


def predict_proba(model: MlpModel, state: StrategyState, features,
                  cfg: StrategyConfig) -> np.ndarray:
    if state.kind == "slda":
        return softmax(slda_predict(state.slda, features, cfg.slda_shrinkage))
    return softmax(forward(model, features))
