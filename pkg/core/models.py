"""
Hard-parameter-sharing multi-task network with manual backpropagation.

This module defines the model the whole laboratory trains:
- Architecture: validated description of trunk, heads and activations
- DenseLayer / MtlNetwork: shared trunk followed by one head per task
- ParamLayout: where every weight and bias lives inside the flat parameter vector
- ForwardTrace: activations retained for the backward pass
- per-sample, per-task gradients with respect to the full parameter vector

Parameter vectors are flat float64 arrays ordered trunk first (layer by layer,
weights then bias), then each task head in task order. The trunk therefore
occupies one contiguous prefix and every head one contiguous block.
"""

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError
from .tensor import Matrix, Rng, Vector, check_same_length

Activation = Literal["tanh", "relu", "linear"]

# Flat parameter vector; its layout is the ParamLayout of the network it came from.
ParamVector = Vector


class Architecture(BaseModel):
    """Layer widths and activations of a multi-task network."""

    input_dim: int
    shared: list[int]
    heads: list[list[int]]
    output_dims: list[int]
    shared_activation: Activation | list[Activation] = "tanh"
    head_activation: Activation | list[Activation] = "relu"
    output_activation: Activation = "linear"

    @field_validator("input_dim")
    @classmethod
    def validate_input_dim(cls, v):
        if v < 1:
            raise ValueError("input_dim must be at least 1")
        return v

    @field_validator("shared")
    @classmethod
    def validate_shared(cls, v):
        if not v:
            raise ValueError("at least one shared layer is required")
        if any(width < 1 for width in v):
            raise ValueError("shared layer widths must be positive")
        return v

    @model_validator(mode="after")
    def validate_heads(self):
        if not self.heads:
            raise ValueError("at least one task head is required")
        if len(self.heads) != len(self.output_dims):
            raise ValueError(
                f"{len(self.heads)} heads but {len(self.output_dims)} output dimensions"
            )
        if any(dim < 1 for dim in self.output_dims):
            raise ValueError("output dimensions must be positive")
        if any(width < 1 for head in self.heads for width in head):
            raise ValueError("head layer widths must be positive")
        if isinstance(self.shared_activation, list) and len(self.shared_activation) != len(self.shared):
            raise ValueError("one shared activation per shared layer is required")
        if isinstance(self.head_activation, list):
            if any(len(self.head_activation) != len(head) for head in self.heads):
                raise ValueError("one head activation per hidden head layer is required")
        return self

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    def shared_activations(self) -> list[str]:
        if isinstance(self.shared_activation, list):
            return list(self.shared_activation)
        return [self.shared_activation] * len(self.shared)

    def head_activations(self, task: int) -> list[str]:
        hidden = self.heads[task]
        if isinstance(self.head_activation, list):
            acts = list(self.head_activation)
        else:
            acts = [self.head_activation] * len(hidden)
        return acts + [self.output_activation]

    @classmethod
    def uniform(
        cls,
        input_dim: int,
        output_dims: Sequence[int],
        shared_layers: int,
        shared_width: int,
        task_layers: int,
        task_width: int,
        **activations,
    ) -> "Architecture":
        """
        Build an architecture from layer counts.

        ``task_layers`` counts every layer of a head including its output layer,
        so a head has ``task_layers - 1`` hidden layers of ``task_width`` units.
        """
        try:
            return cls(
                input_dim=input_dim,
                shared=[shared_width] * shared_layers,
                heads=[[task_width] * max(task_layers - 1, 0) for _ in output_dims],
                output_dims=list(output_dims),
                **activations,
            )
        except ValidationError as e:
            raise ConfigurationError(f"Invalid architecture: {e}") from e


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """``z = a @ weights + bias`` followed by ``activation``; weights are (fan_in, fan_out)."""

    weights: Matrix
    bias: Vector
    activation: str

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class Segment:
    """One weight or bias block of the flat parameter vector."""

    owner: str  # "shared" or "head"
    task: int | None
    layer: int
    kind: str  # "weights" or "bias"
    start: int
    stop: int
    shape: tuple[int, ...]


class ParamLayout:
    """Maps flat parameter indices to (layer, weights-or-bias) blocks."""

    def __init__(self, segments: list[Segment], n_tasks: int):
        self.segments = segments
        self.n_tasks = n_tasks
        self.size = segments[-1].stop if segments else 0
        trunk = [s for s in segments if s.owner == "shared"]
        self.trunk = slice(0, trunk[-1].stop if trunk else 0)
        self.heads = []
        for task in range(n_tasks):
            blocks = [s for s in segments if s.owner == "head" and s.task == task]
            self.heads.append(slice(blocks[0].start, blocks[-1].stop))

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.segments == other.segments

    def head(self, task: int) -> slice:
        return self.heads[task]

    def zeros(self) -> ParamVector:
        return np.zeros(self.size)


@dataclass
class LayerTrace:
    inputs: Matrix
    pre: Matrix
    post: Matrix

    def rows(self, index: slice) -> "LayerTrace":
        return LayerTrace(self.inputs[index], self.pre[index], self.post[index])


@dataclass
class ForwardTrace:
    """Per-layer inputs, pre-activations and activations of one mini-batch."""

    shared: list[LayerTrace]
    heads: list[list[LayerTrace]]

    @property
    def batch_size(self) -> int:
        return self.shared[0].inputs.shape[0]

    def rows(self, index: slice) -> "ForwardTrace":
        return ForwardTrace(
            shared=[t.rows(index) for t in self.shared],
            heads=[[t.rows(index) for t in head] for head in self.heads],
        )


def activate(name: str, z: Matrix) -> Matrix:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ConfigurationError(f"Unknown activation '{name}'")


def activation_derivative(name: str, z: Matrix, a: Matrix) -> Matrix:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "linear":
        return np.ones_like(z)
    raise ConfigurationError(f"Unknown activation '{name}'")


@dataclass(frozen=True, eq=False)
class MtlNetwork:
    """Shared trunk feeding one stack of dense layers per task."""

    architecture: Architecture
    shared_layers: tuple[DenseLayer, ...]
    task_heads: tuple[tuple[DenseLayer, ...], ...]
    layout: ParamLayout = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layout", _build_layout(self.shared_layers, self.task_heads))

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    @property
    def n_tasks(self) -> int:
        return len(self.task_heads)

    @property
    def n_parameters(self) -> int:
        return self.layout.size

    def flatten(self) -> ParamVector:
        parts = []
        for layer in self._all_layers():
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def with_parameters(self, theta: ParamVector) -> "MtlNetwork":
        """Return a network with the same architecture holding ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.layout.size,):
            raise ConfigurationError(
                f"Parameter vector of length {theta.shape} does not match {self.layout.size} parameters"
            )
        cursor = 0

        def rebuild(layer: DenseLayer) -> DenseLayer:
            nonlocal cursor
            n_w = layer.weights.size
            weights = theta[cursor:cursor + n_w].reshape(layer.weights.shape).copy()
            cursor += n_w
            bias = theta[cursor:cursor + layer.bias.size].copy()
            cursor += layer.bias.size
            return DenseLayer(weights, bias, layer.activation)

        shared = tuple(rebuild(layer) for layer in self.shared_layers)
        heads = tuple(tuple(rebuild(layer) for layer in head) for head in self.task_heads)
        return MtlNetwork(self.architecture, shared, heads)

    def _all_layers(self):
        yield from self.shared_layers
        for head in self.task_heads:
            yield from head


def _build_layout(shared_layers, task_heads) -> ParamLayout:
    segments = []
    cursor = 0

    def add(owner, task, index, layer):
        nonlocal cursor
        segments.append(Segment(owner, task, index, "weights", cursor, cursor + layer.weights.size, layer.weights.shape))
        cursor += layer.weights.size
        segments.append(Segment(owner, task, index, "bias", cursor, cursor + layer.bias.size, layer.bias.shape))
        cursor += layer.bias.size

    for index, layer in enumerate(shared_layers):
        add("shared", None, index, layer)
    for task, head in enumerate(task_heads):
        for index, layer in enumerate(head):
            add("head", task, index, layer)
    return ParamLayout(segments, len(task_heads))


def glorot_layer(rng: Rng, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weights = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return DenseLayer(weights, np.zeros(fan_out), activation)


def init_network(arch: Architecture, rng: Rng) -> MtlNetwork:
    """Glorot-uniform weights, zero biases; trunk drawn first, then heads in task order."""
    shared = []
    width = arch.input_dim
    for out, act in zip(arch.shared, arch.shared_activations()):
        shared.append(glorot_layer(rng, width, out, act))
        width = out
    trunk_width = width
    heads = []
    for task, hidden in enumerate(arch.heads):
        layers = []
        width = trunk_width
        for out, act in zip([*hidden, arch.output_dims[task]], arch.head_activations(task)):
            layers.append(glorot_layer(rng, width, out, act))
            width = out
        heads.append(tuple(layers))
    return MtlNetwork(arch, tuple(shared), tuple(heads))


def _run_layers(layers: Sequence[DenseLayer], inputs: Matrix) -> list[LayerTrace]:
    traces = []
    a = inputs
    for layer in layers:
        z = a @ layer.weights + layer.bias
        out = activate(layer.activation, z)
        traces.append(LayerTrace(a, z, out))
        a = out
    return traces


def forward(net: MtlNetwork, X: Matrix) -> tuple[list[Matrix], ForwardTrace]:
    """Predictions of every task head for every row of ``X`` plus the trace for backward."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ConfigurationError(f"Input of shape {X.shape} does not match input_dim {net.input_dim}")
    shared = _run_layers(net.shared_layers, X)
    features = shared[-1].post
    heads = [_run_layers(head, features) for head in net.task_heads]
    predictions = [head[-1].post for head in heads]
    return predictions, ForwardTrace(shared, heads)


def predict(net: MtlNetwork, X: Matrix) -> list[Matrix]:
    return forward(net, X)[0]


def _backprop(layers, traces, delta, per_sample: bool):
    """
    Push ``delta`` (dL/d output of the last layer) back through ``layers``.

    Returns the (weights, bias) gradients in layer order and dL/d input. With
    ``per_sample`` the gradients keep a leading batch axis; otherwise they are
    summed over the batch.
    """
    grads = []
    for layer, trace in zip(reversed(layers), reversed(traces)):
        delta = delta * activation_derivative(layer.activation, trace.pre, trace.post)
        if per_sample:
            g_w = trace.inputs[:, :, None] * delta[:, None, :]
            g_b = delta
        else:
            g_w = trace.inputs.T @ delta
            g_b = delta.sum(axis=0)
        grads.append((g_w, g_b))
        delta = delta @ layer.weights.T
    grads.reverse()
    return grads, delta


def _scatter(target: np.ndarray, grads, segments, per_sample: bool) -> None:
    """Write layer gradients into the matching weight/bias segments of ``target``."""
    blocks = iter(segments)
    for g_w, g_b in grads:
        seg_w, seg_b = next(blocks), next(blocks)
        if per_sample:
            target[:, seg_w.start:seg_w.stop] = g_w.reshape(g_w.shape[0], -1)
            target[:, seg_b.start:seg_b.stop] = g_b
        else:
            target[seg_w.start:seg_w.stop] = g_w.ravel()
            target[seg_b.start:seg_b.stop] = g_b


def task_backward(
    net: MtlNetwork,
    trace: ForwardTrace,
    task: int,
    output_grad: Matrix,
    per_sample: bool,
) -> np.ndarray:
    """
    Gradient of a task loss given dL/d(prediction) rows.

    Returns an (N, P) array of per-sample gradients when ``per_sample`` is set,
    otherwise the (P,) gradient of the summed loss. Head blocks of other tasks
    stay exactly zero.
    """
    layout = net.layout
    n = trace.batch_size
    target = np.zeros((n, layout.size)) if per_sample else np.zeros(layout.size)
    head_segments = [s for s in layout.segments if s.owner == "head" and s.task == task]
    trunk_segments = [s for s in layout.segments if s.owner == "shared"]
    head_grads, delta = _backprop(net.task_heads[task], trace.heads[task], output_grad, per_sample)
    _scatter(target, head_grads, head_segments, per_sample)
    trunk_grads, _ = _backprop(net.shared_layers, trace.shared, delta, per_sample)
    _scatter(target, trunk_grads, trunk_segments, per_sample)
    return target


def per_sample_task_gradients(
    net: MtlNetwork,
    batch,
    loss_specs,
    vectorized: bool = True,
) -> np.ndarray:
    """
    Unweighted per-sample loss gradients, shape (N_T, N_B, P).

    Entry ``[i, j]`` is the gradient of task ``i``'s loss on sample ``j`` with
    respect to every parameter. The forward trace is computed once per batch.
    The vectorized path backpropagates all samples of a task together; the
    loop path runs one backward pass per (task, sample) pair.
    """
    from .objectives import batch_loss_grads

    if len(loss_specs) != net.n_tasks or len(batch.targets) != net.n_tasks:
        raise ConfigurationError(
            f"Expected targets and loss specs for {net.n_tasks} tasks, "
            f"got {len(batch.targets)} targets and {len(loss_specs)} specs"
        )
    predictions, trace = forward(net, batch.X)
    n = trace.batch_size
    grid = np.zeros((net.n_tasks, n, net.n_parameters))
    for task, spec in enumerate(loss_specs):
        output_grad = batch_loss_grads(spec, batch.targets[task], predictions[task])
        if vectorized:
            grid[task] = task_backward(net, trace, task, output_grad, per_sample=True)
            continue
        for j in range(n):
            rows = slice(j, j + 1)
            grid[task, j] = task_backward(net, trace.rows(rows), task, output_grad[rows], per_sample=False)
    return grid


def weighted_total_gradient(grads: np.ndarray, W: np.ndarray) -> ParamVector:
    """``sum_ij W[i, j] * grads[i, j]``."""
    W = np.asarray(W, dtype=np.float64)
    if grads.ndim != 3 or W.shape != grads.shape[:2]:
        raise ConfigurationError(f"Weight matrix {W.shape} does not match gradient grid {grads.shape[:2]}")
    return np.einsum("ij,ijp->p", W, grads)


def sgd_step(theta: ParamVector, g: ParamVector, eta: float) -> ParamVector:
    """One plain gradient-descent update ``theta - eta * g``."""
    if eta <= 0:
        raise ConfigurationError(f"Learning rate must be positive, got {eta}")
    check_same_length(np.asarray(theta), np.asarray(g))
    return theta - eta * g
