"""
Synthetic multi-task datasets with corruption provenance.

- ToySpec / generate_toy: tanh regression tasks sharing a common basis, with
  Gaussian target noise on an exact-count subset of training samples per task
- ClassifySpec / generate_classify: Gaussian-cluster classification with
  one-vs-rest tasks and uniform or background label flips
- Split / TaskBatch: immutable splits and mini-batches carrying per-task flags
- write_split_csv: columnar export for external inspection

Validation and test splits are never corrupted.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError
from .objectives import LossSpec
from .tensor import Matrix, Rng, derive_rng, gaussian_matrix

logger = logging.getLogger(__name__)


def exact_count(fraction: float, n: int) -> int:
    """floor(fraction * n), tolerant to binary representation error (0.7 * 1000 -> 700)."""
    return int(math.floor(fraction * n + 1e-9))


@dataclass(frozen=True, eq=False)
class TaskBatch:
    """Mini-batch inputs, per-task targets and per-task corruption flags."""

    X: Matrix
    targets: tuple[np.ndarray, ...]
    corrupted: np.ndarray  # (N_T, N) bool
    indices: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.targets)


@dataclass(frozen=True, eq=False)
class Split:
    """One immutable dataset split; ``clean_targets`` hold the pre-corruption values."""

    name: str
    X: Matrix
    targets: tuple[np.ndarray, ...]
    clean_targets: tuple[np.ndarray, ...]
    corrupted: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.targets)

    def take(self, indices) -> TaskBatch:
        indices = np.asarray(indices, dtype=np.int64)
        return TaskBatch(
            X=self.X[indices],
            targets=tuple(t[indices] for t in self.targets),
            corrupted=self.corrupted[:, indices],
            indices=indices,
        )

    def as_batch(self) -> TaskBatch:
        return self.take(np.arange(len(self)))


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    train: Split
    val: Split
    test: Split
    loss_specs: tuple[LossSpec, ...]
    output_dims: tuple[int, ...]
    main_task: int = 0

    @property
    def input_dim(self) -> int:
        return self.train.X.shape[1]

    @property
    def n_tasks(self) -> int:
        return len(self.loss_specs)


class ToySpec(BaseModel):
    """
    Tanh regression tasks ``y_i = sigma_i * tanh((B + eps_i) x)``.

    ``b_scale``, ``eps_scale`` and ``noise_scale`` are the second argument of
    the N(0, .) notation; ``scale_convention`` says whether that argument is a
    standard deviation (default) or a variance.

    With ``noise_mode="shared"`` every corrupted target of a task is moved by
    the same offset, drawn once per task; ``"sample"`` draws one offset per
    corrupted target.
    """

    input_dim: int = 10
    output_dim: int = 1
    n_tasks: int = 2
    sigma: list[float] | float = 1.0
    b_scale: float = 1.0
    eps_scale: float = math.sqrt(3.5)
    noise_scale: float = math.sqrt(2.0)
    scale_convention: Literal["std", "variance"] = "std"
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    noise_fraction: float = 0.0
    task_noise_fractions: list[float] | None = None
    noisy_tasks: Literal["all", "main"] = "all"
    noise_mode: Literal["shared", "sample"] = "shared"
    seed: int = 0

    @field_validator("input_dim", "output_dim", "n_tasks", "n_train", "n_val", "n_test")
    @classmethod
    def validate_count(cls, v):
        if v < 1:
            raise ValueError("counts must be positive")
        return v

    @field_validator("noise_fraction")
    @classmethod
    def validate_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")
        return v

    @field_validator("b_scale", "eps_scale", "noise_scale")
    @classmethod
    def validate_scale(cls, v):
        if v < 0:
            raise ValueError("scales must be non-negative")
        return v

    @model_validator(mode="after")
    def validate_per_task(self):
        if isinstance(self.sigma, list) and len(self.sigma) != self.n_tasks:
            raise ValueError("one sigma per task is required")
        if self.task_noise_fractions is not None:
            if len(self.task_noise_fractions) != self.n_tasks:
                raise ValueError("one noise fraction per task is required")
            if any(not 0.0 <= f <= 1.0 for f in self.task_noise_fractions):
                raise ValueError("task noise fractions must lie in [0, 1]")
        return self

    def std(self, scale: float) -> float:
        return scale if self.scale_convention == "std" else math.sqrt(scale)

    def sigmas(self) -> list[float]:
        if isinstance(self.sigma, list):
            return list(self.sigma)
        return [self.sigma] * self.n_tasks

    def fractions(self) -> list[float]:
        if self.task_noise_fractions is not None:
            return list(self.task_noise_fractions)
        if self.noisy_tasks == "main":
            return [self.noise_fraction] + [0.0] * (self.n_tasks - 1)
        return [self.noise_fraction] * self.n_tasks


class ClassifySpec(BaseModel):
    """Gaussian clusters, one per class; the main task detects ``main_class``."""

    input_dim: int = 10
    n_classes: int = 10
    n_tasks: int = 4
    center_scale: float = 1.0
    cluster_std: float = 1.0
    main_class: int = 0
    main_loss: Literal["bce", "ce"] = "bce"
    flip_mode: Literal["none", "uniform", "background"] = "none"
    flip_fraction: float = 0.0
    background_class: int = 1
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 1000
    seed: int = 0

    @field_validator("input_dim", "n_tasks", "n_train", "n_val", "n_test")
    @classmethod
    def validate_count(cls, v):
        if v < 1:
            raise ValueError("counts must be positive")
        return v

    @field_validator("n_classes")
    @classmethod
    def validate_classes(cls, v):
        if v < 2:
            raise ValueError("at least two classes are required")
        return v

    @field_validator("flip_fraction")
    @classmethod
    def validate_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("flip_fraction must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_classes_and_tasks(self):
        if not 0 <= self.background_class < self.n_classes:
            raise ValueError("background_class must be a valid class id")
        if not 0 <= self.main_class < self.n_classes:
            raise ValueError("main_class must be a valid class id")
        if self.n_tasks > self.n_classes:
            raise ValueError("n_tasks cannot exceed n_classes (one one-vs-rest task per class)")
        return self

    def task_classes(self) -> list[int]:
        """Class detected by each task: the main class first, then the lowest remaining ids."""
        others = [c for c in range(self.n_classes) if c != self.main_class]
        return [self.main_class] + others[: self.n_tasks - 1]


def build_spec(model: type[BaseModel], **values):
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {model.__name__}: {e}") from e


def _choose(rng: Rng, n: int, count: int) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    if count > 0:
        flags[rng.choice(n, size=count, replace=False)] = True
    return flags


def generate_toy(spec: ToySpec) -> Dataset:
    """Draw the toy regression splits; only training targets are corrupted."""
    rng = derive_rng(spec.seed, "data")
    d, k = spec.input_dim, spec.output_dim
    basis = gaussian_matrix(rng, k, d, spec.std(spec.b_scale))
    offsets = [gaussian_matrix(rng, k, d, spec.std(spec.eps_scale)) for _ in range(spec.n_tasks)]
    sigmas = spec.sigmas()

    def draw(n: int):
        X = rng.standard_normal((n, d))
        targets = tuple(
            sigmas[task] * np.tanh(X @ (basis + offsets[task]).T)
            for task in range(spec.n_tasks)
        )
        return X, targets

    splits = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        X, clean = draw(n)
        splits[name] = (X, clean)

    X, clean = splits["train"]
    noise_std = spec.std(spec.noise_scale)
    noisy = []
    flags = np.zeros((spec.n_tasks, spec.n_train), dtype=bool)
    for task, fraction in enumerate(spec.fractions()):
        flags[task] = _choose(rng, spec.n_train, exact_count(fraction, spec.n_train))
        if spec.noise_mode == "shared":
            noise = np.broadcast_to(rng.standard_normal((1, k)) * noise_std, (spec.n_train, k))
        else:
            noise = rng.standard_normal((spec.n_train, k)) * noise_std
        noisy.append(clean[task] + noise * flags[task][:, None])
    train = Split("train", X, tuple(noisy), clean, flags)
    val = _clean_split("val", *splits["val"])
    test = _clean_split("test", *splits["test"])
    logger.debug("toy data: %d corrupted training targets per task", int(flags.sum(axis=1).max()))
    return Dataset(
        name="toy",
        train=train,
        val=val,
        test=test,
        loss_specs=tuple(LossSpec("mse") for _ in range(spec.n_tasks)),
        output_dims=tuple(k for _ in range(spec.n_tasks)),
    )


def _clean_split(name: str, X, targets) -> Split:
    n = X.shape[0]
    return Split(name, X, targets, targets, np.zeros((len(targets), n), dtype=bool))


def apply_uniform_flip(labels, fraction: float, n_classes: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Move exactly floor(fraction * n) labels to a uniformly chosen different class."""
    if n_classes < 2:
        raise ConfigurationError("Uniform label flips need at least two classes")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"Flip fraction must lie in [0, 1], got {fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    flags = _choose(rng, labels.shape[0], exact_count(fraction, labels.shape[0]))
    flipped = labels.copy()
    shift = rng.integers(1, n_classes, size=int(flags.sum()))
    flipped[flags] = (labels[flags] + shift) % n_classes
    return flipped, flags


def apply_background_flip(labels, fraction: float, background_class: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Move floor(fraction * n) labels, drawn among non-background samples, to ``background_class``."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"Flip fraction must lie in [0, 1], got {fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    candidates = np.flatnonzero(labels != background_class)
    count = min(exact_count(fraction, labels.shape[0]), candidates.shape[0])
    flags = np.zeros(labels.shape[0], dtype=bool)
    if count > 0:
        flags[rng.choice(candidates, size=count, replace=False)] = True
    flipped = labels.copy()
    flipped[flags] = background_class
    return flipped, flags


def _classify_targets(spec: ClassifySpec, labels: np.ndarray) -> tuple[np.ndarray, ...]:
    targets = []
    for task, cls in enumerate(spec.task_classes()):
        if task == 0 and spec.main_loss == "ce":
            targets.append(labels.copy())
        else:
            targets.append((labels == cls).astype(np.float64).reshape(-1, 1))
    return tuple(targets)


def generate_classify(spec: ClassifySpec) -> Dataset:
    """
    Draw the classification splits.

    Flips corrupt the class label of a training sample, so every task derived
    from it carries the sample's flag.
    """
    rng = derive_rng(spec.seed, "data")
    centers = gaussian_matrix(rng, spec.n_classes, spec.input_dim, spec.center_scale)

    def draw(n: int):
        labels = rng.integers(0, spec.n_classes, size=n)
        X = centers[labels] + rng.standard_normal((n, spec.input_dim)) * spec.cluster_std
        return X, labels

    X_train, labels = draw(spec.n_train)
    X_val, labels_val = draw(spec.n_val)
    X_test, labels_test = draw(spec.n_test)

    if spec.flip_mode == "uniform":
        noisy_labels, flags = apply_uniform_flip(labels, spec.flip_fraction, spec.n_classes, rng)
    elif spec.flip_mode == "background":
        noisy_labels, flags = apply_background_flip(labels, spec.flip_fraction, spec.background_class, rng)
    else:
        noisy_labels, flags = labels.copy(), np.zeros(spec.n_train, dtype=bool)

    train = Split(
        "train",
        X_train,
        _classify_targets(spec, noisy_labels),
        _classify_targets(spec, labels),
        np.tile(flags, (spec.n_tasks, 1)),
    )
    val = _clean_split("val", X_val, _classify_targets(spec, labels_val))
    test = _clean_split("test", X_test, _classify_targets(spec, labels_test))

    main_spec = LossSpec("ce-with-logits") if spec.main_loss == "ce" else LossSpec("bce-with-logits")
    loss_specs = (main_spec,) + tuple(LossSpec("bce-with-logits") for _ in range(spec.n_tasks - 1))
    output_dims = (spec.n_classes if spec.main_loss == "ce" else 1,) + (1,) * (spec.n_tasks - 1)
    return Dataset("classify", train, val, test, loss_specs, output_dims)


def next_batch(split: Split, batch_size: int, rng: Rng) -> TaskBatch:
    """Uniform sample with replacement."""
    if len(split) == 0:
        raise ConfigurationError(f"Cannot sample from empty split '{split.name}'")
    if batch_size < 1:
        raise ConfigurationError(f"Batch size must be positive, got {batch_size}")
    return split.take(rng.integers(0, len(split), size=batch_size))


def write_split_csv(split: Split, path: Path) -> None:
    """Header row, then one row per sample: inputs, per-task targets, per-task flags."""
    columns = [f"x{k}" for k in range(split.X.shape[1])]
    target_rows = []
    for task, target in enumerate(split.targets):
        values = np.asarray(target, dtype=np.float64).reshape(len(split), -1)
        columns.extend(
            [f"y{task}"] if values.shape[1] == 1 else [f"y{task}_{k}" for k in range(values.shape[1])]
        )
        target_rows.append(values)
    columns.extend(f"flag{task}" for task in range(split.n_tasks))

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for j in range(len(split)):
            row = [format(v, ".9g") for v in split.X[j]]
            for values in target_rows:
                row.extend(format(v, ".9g") for v in values[j])
            row.extend(str(int(flag)) for flag in split.corrupted[:, j])
            writer.writerow(row)
