"""
Run configuration using Pydantic Settings.

A TrainConfig is assembled from, highest precedence first: explicit values
(CLI flags), a flat ``key = value`` config file, ``SLGRAD_*`` environment
variables, and the defaults below.
"""

import json
import logging
from pathlib import Path
from typing import Literal

from pydantic import ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .datagen import ClassifySpec, ToySpec, build_spec
from .exceptions import ConfigurationError
from .models import Architecture
from .weighting import ALGORITHMS, WeighterOptions

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Optimal toy hyperparameters per algorithm: (lr, batch size, shared layers, task layers).
TUNED_TOY_HYPERPARAMETERS = {
    "olaux": (0.1, 64, 2, 2),
    "pcgrad": (0.1, 32, 3, 3),
    "cagrad": (0.1, 64, 2, 2),
    "cossim": (0.01, 64, 3, 4),
    "static": (0.01, 32, 4, 4),
    "gradnorm": (0.1, 32, 2, 2),
    "random": (0.01, 64, 3, 4),
    "slgrad": (0.1, 32, 3, 4),
}


class TrainConfig(BaseSettings):
    """Every knob of one training run; flat so it maps onto a key/value file."""
    model_config = SettingsConfigDict(
        env_prefix="SLGRAD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Algorithm
    algorithm: str = "slgrad"
    slgrad_cosine: bool = False
    exact_lookahead: bool = False
    olaux_horizon: int = 5
    olaux_lr: float = 1e-3
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    cagrad_c: float = 0.4
    cagrad_iters: int = 20

    # Optimization
    lr: float = 0.1
    batch_size: int = 32
    val_batch_size: int | None = None
    steps: int = 5000
    seed: int = 0
    data_seed: int | None = None
    patience: int = 500
    divergence_threshold: float = 1e6

    # Architecture
    shared_layers: int = 3
    shared_width: int = 64
    task_layers: int = 4
    task_width: int = 32
    shared_activation: Literal["tanh", "relu", "linear"] = "tanh"
    head_activation: Literal["tanh", "relu", "linear"] = "relu"

    # Dataset
    dataset: Literal["toy", "classify"] = "toy"
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    input_dim: int = 10
    noise: float = 0.0
    aux_noise: float | None = None
    noisy_tasks: Literal["all", "main"] = "all"
    noise_mode: Literal["shared", "sample"] = "shared"
    sigma: float = 1.0
    scale_convention: Literal["std", "variance"] = "std"
    n_classes: int = 10
    n_tasks: int | None = None
    flip: Literal["none", "uniform", "background"] = "none"
    flip_frac: float = 0.0
    background_class: int = 1
    main_class: int = 0
    main_loss: Literal["bce", "ce"] = "bce"
    center_scale: float = 1.0
    cluster_std: float = 1.0

    # Harness
    eval_every: int = 50
    out: str | None = None
    taylor_check: bool = False
    log_weights: bool = False

    @field_validator("algorithm")
    @classmethod
    def validate_algorithm(cls, v):
        if v not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        return v

    @field_validator("lr")
    @classmethod
    def validate_lr(cls, v):
        if not v > 0:
            raise ValueError("lr must be positive")
        return v

    @field_validator("steps", "batch_size", "eval_every", "shared_layers", "task_layers",
                     "shared_width", "task_width", "input_dim", "olaux_horizon", "cagrad_iters")
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("val_batch_size", "patience")
    @classmethod
    def validate_non_negative(cls, v):
        if v is not None and v < 0:
            raise ValueError("must be non-negative")
        return v

    @field_validator("noise", "flip_frac")
    @classmethod
    def validate_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_aux_noise(self):
        if self.aux_noise is not None and not 0.0 <= self.aux_noise <= 1.0:
            raise ValueError("aux_noise must lie in [0, 1]")
        return self

    def effective_val_batch_size(self) -> int | None:
        """Meta-batch size; None means the whole validation split."""
        if self.val_batch_size is None:
            return self.batch_size
        return self.val_batch_size or None

    def dataset_seed(self) -> int:
        """Seed of the data draw; fixing ``data_seed`` varies only initialization and batching across seeds."""
        return self.seed if self.data_seed is None else self.data_seed

    def task_count(self) -> int:
        if self.n_tasks is not None:
            return self.n_tasks
        return 2 if self.dataset == "toy" else 4

    def toy_spec(self) -> ToySpec:
        fractions = None
        if self.aux_noise is not None:
            fractions = [self.noise] + [self.aux_noise] * (self.task_count() - 1)
        sizes = {k: v for k, v in (("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)) if v}
        return build_spec(
            ToySpec,
            input_dim=self.input_dim,
            n_tasks=self.task_count(),
            sigma=self.sigma,
            scale_convention=self.scale_convention,
            noise_fraction=self.noise,
            task_noise_fractions=fractions,
            noisy_tasks=self.noisy_tasks,
            noise_mode=self.noise_mode,
            seed=self.dataset_seed(),
            **sizes,
        )

    def classify_spec(self) -> ClassifySpec:
        sizes = {k: v for k, v in (("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)) if v}
        return build_spec(
            ClassifySpec,
            input_dim=self.input_dim,
            n_classes=self.n_classes,
            n_tasks=self.task_count(),
            center_scale=self.center_scale,
            cluster_std=self.cluster_std,
            main_class=self.main_class,
            main_loss=self.main_loss,
            flip_mode=self.flip,
            flip_fraction=self.flip_frac,
            background_class=self.background_class,
            seed=self.dataset_seed(),
            **sizes,
        )

    def architecture(self, input_dim: int, output_dims) -> Architecture:
        return Architecture.uniform(
            input_dim=input_dim,
            output_dims=output_dims,
            shared_layers=self.shared_layers,
            shared_width=self.shared_width,
            task_layers=self.task_layers,
            task_width=self.task_width,
            shared_activation=self.shared_activation,
            head_activation=self.head_activation,
        )

    def weighter_options(self, main_task: int = 0) -> WeighterOptions:
        return WeighterOptions(
            main_task=main_task,
            slgrad_cosine=self.slgrad_cosine,
            exact_lookahead=self.exact_lookahead,
            olaux_horizon=self.olaux_horizon,
            olaux_lr=self.olaux_lr,
            gradnorm_alpha=self.gradnorm_alpha,
            gradnorm_lr=self.gradnorm_lr,
            cagrad_c=self.cagrad_c,
            cagrad_iters=self.cagrad_iters,
        )

    def setting_label(self) -> str:
        """Short name of the data setting, used to group suite results."""
        if self.dataset == "toy":
            label = f"toy-noise{self.noise:g}"
            if self.aux_noise is not None:
                label += f"-aux{self.aux_noise:g}"
            return label
        if self.flip == "none":
            return f"classify-{self.main_loss}-clean"
        return f"classify-{self.main_loss}-{self.flip}{self.flip_frac:g}"

    def replace(self, **changes) -> "TrainConfig":
        return make_config(**{**self.model_dump(), **changes})


def make_config(**values) -> TrainConfig:
    """Build a TrainConfig, turning validation failures into ConfigurationError."""
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def tuned_hyperparameters(algorithm: str) -> dict:
    """Toy-grid optimum for ``algorithm`` as TrainConfig field values."""
    if algorithm not in TUNED_TOY_HYPERPARAMETERS:
        raise ConfigurationError(f"No tuned toy hyperparameters for '{algorithm}'")
    lr, batch_size, shared_layers, task_layers = TUNED_TOY_HYPERPARAMETERS[algorithm]
    return {"lr": lr, "batch_size": batch_size, "shared_layers": shared_layers, "task_layers": task_layers}


def parse_value(raw: str):
    """JSON literal when it parses as one, bare string otherwise."""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_file(path: Path) -> dict:
    """Read a flat ``key = value`` file; unknown keys are reported all at once."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} not found")

    values = {}
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{number}: expected 'key = value', got '{line}'")
            key, raw = line.split("=", 1)
            values[key.strip()] = parse_value(raw)

    unknown = [key for key in values if key not in TrainConfig.model_fields]
    if unknown:
        raise ConfigurationError(
            f"Unknown keys in {path}: {', '.join(unknown)}\n"
            "Please check the key names against TrainConfig."
        )
    return values


def load_config(path: Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Config file values, overridden by non-None ``overrides``."""
    values = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(**values)


def dump_config(config: TrainConfig, path: Path) -> None:
    """Write every field, one ``key = value`` line each, in declaration order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = config.model_dump(mode="json")
    with open(path, "w") as f:
        for key in TrainConfig.model_fields:
            f.write(f"{key} = {json.dumps(values[key])}\n")


def configure_logging(level: int = logging.INFO) -> None:
    """Install one stream handler on the root logger."""
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
