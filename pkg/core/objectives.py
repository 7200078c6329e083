"""
Per-sample losses, their gradients with respect to predictions, and the
validation meta-objective.

Targets are stored per task: float matrices (N, out_dim) for ``mse`` and
``bce-with-logits``, integer class indices (N,) for ``ce-with-logits``.
Every per-sample loss is reduced by a mean over output dimensions.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .exceptions import ConfigurationError
from .models import MtlNetwork, ParamVector, forward, task_backward
from .tensor import Vector

LossKind = Literal["mse", "bce-with-logits", "ce-with-logits"]
LOSS_KINDS = ("mse", "bce-with-logits", "ce-with-logits")


@dataclass(frozen=True)
class LossSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"Unknown loss '{self.kind}', expected one of {', '.join(LOSS_KINDS)}")


@dataclass(frozen=True)
class MetaObjective:
    """Mean validation loss of the main task."""

    main_task: int = 0
    metric: str = "loss"

    def __post_init__(self):
        if self.metric != "loss":
            raise ConfigurationError(f"Only differentiable loss meta-objectives are supported, got '{self.metric}'")


def _class_indices(y, n_classes: int) -> np.ndarray:
    labels = np.asarray(y)
    if labels.dtype.kind == "f":
        if not np.all(labels == np.round(labels)):
            raise ConfigurationError("Class targets must be integers")
        labels = labels.astype(np.int64)
    labels = labels.reshape(-1)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigurationError(f"Class index out of range for {n_classes} classes: {labels}")
    return labels


def _as_rows(values, n: int) -> np.ndarray:
    rows = np.asarray(values, dtype=np.float64)
    return rows.reshape(n, -1)


def batch_loss_values(spec: LossSpec, Y, Yhat) -> np.ndarray:
    """Per-sample losses, shape (N,)."""
    Yhat = np.asarray(Yhat, dtype=np.float64)
    if Yhat.ndim == 1:
        Yhat = Yhat.reshape(-1, 1)
    n = Yhat.shape[0]
    if spec.kind == "ce-with-logits":
        labels = _class_indices(Y, Yhat.shape[1])
        if labels.shape[0] != n:
            raise ConfigurationError(f"{labels.shape[0]} class targets for {n} predictions")
        return -log_softmax(Yhat, axis=1)[np.arange(n), labels]
    Y = _as_rows(Y, n)
    if Y.shape != Yhat.shape:
        raise ConfigurationError(f"Target shape {Y.shape} does not match prediction shape {Yhat.shape}")
    if spec.kind == "mse":
        return np.mean((Y - Yhat) ** 2, axis=1)
    # max(z, 0) - z*y + log(1 + exp(-|z|))
    losses = np.maximum(Yhat, 0.0) - Yhat * Y + np.log1p(np.exp(-np.abs(Yhat)))
    return np.mean(losses, axis=1)


def batch_loss_grads(spec: LossSpec, Y, Yhat) -> np.ndarray:
    """Per-sample dL_j/d(prediction_j), shape (N, out_dim)."""
    Yhat = np.asarray(Yhat, dtype=np.float64)
    if Yhat.ndim == 1:
        Yhat = Yhat.reshape(-1, 1)
    n, width = Yhat.shape
    if spec.kind == "ce-with-logits":
        labels = _class_indices(Y, width)
        grad = softmax(Yhat, axis=1)
        grad[np.arange(n), labels] -= 1.0
        return grad
    Y = _as_rows(Y, n)
    if Y.shape != Yhat.shape:
        raise ConfigurationError(f"Target shape {Y.shape} does not match prediction shape {Yhat.shape}")
    if spec.kind == "mse":
        return 2.0 * (Yhat - Y) / width
    return (expit(Yhat) - Y) / width


def loss_value(spec: LossSpec, y, yhat) -> float:
    """Loss of a single sample; ``y`` is a class index for ce-with-logits."""
    yhat = np.asarray(yhat, dtype=np.float64).reshape(1, -1)
    return float(batch_loss_values(spec, np.asarray(y).reshape(1, -1), yhat)[0])


def loss_grad_wrt_prediction(spec: LossSpec, y, yhat) -> Vector:
    yhat = np.asarray(yhat, dtype=np.float64).reshape(1, -1)
    return batch_loss_grads(spec, np.asarray(y).reshape(1, -1), yhat)[0]


def task_losses(net: MtlNetwork, batch, loss_specs) -> np.ndarray:
    """Mean loss of every task on ``batch``, shape (N_T,)."""
    predictions, _ = forward(net, batch.X)
    return np.array([
        batch_loss_values(spec, batch.targets[task], predictions[task]).mean()
        for task, spec in enumerate(loss_specs)
    ])


def meta_value(net: MtlNetwork, val_batch, loss_specs, meta: MetaObjective) -> float:
    """M(theta): mean main-task loss on ``val_batch``."""
    _check_validation_batch(val_batch)
    predictions, _ = forward(net, val_batch.X)
    spec = loss_specs[meta.main_task]
    return float(batch_loss_values(spec, val_batch.targets[meta.main_task], predictions[meta.main_task]).mean())


def validation_gradient(net: MtlNetwork, val_batch, loss_specs, meta: MetaObjective) -> ParamVector:
    """Gradient of the mean main-task validation loss; auxiliary head blocks are zero."""
    _check_validation_batch(val_batch)
    predictions, trace = forward(net, val_batch.X)
    task = meta.main_task
    n = len(val_batch)
    output_grad = batch_loss_grads(loss_specs[task], val_batch.targets[task], predictions[task])
    return task_backward(net, trace, task, output_grad / n, per_sample=False)


def _check_validation_batch(val_batch) -> None:
    if val_batch is None or len(val_batch) == 0:
        raise ConfigurationError("Validation batch is empty")
