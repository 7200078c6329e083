"""
Sample-level and task-level weighting algorithms behind one interface.

Pure rules (SLGrad scores and normalization, static, random, CosSim mask,
PCGrad, CAGrad) are module functions; algorithms with cross-step state
(OL-AUX, GradNorm, Random's generator) keep it on their weighter.

Weighters are registered by tag, the way tables are registered with an admin
site: ``weighters.register("slgrad", SLGradWeighter)`` and
``weighters.create("slgrad", ...)``. Each weighter either emits a
SampleWeightMatrix (N_T x N_B, non-negative, summing to 1 or all zero) or a
combined update direction.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Type

import numpy as np
from pydantic import BaseModel
from scipy.special import softmax

from .exceptions import ConfigurationError
from .tensor import Rng, Vector, dot, is_finite

logger = logging.getLogger(__name__)

SampleWeightMatrix = np.ndarray

NORMALIZATION_TOLERANCE = 1e-9


def check_weight_matrix(W: SampleWeightMatrix) -> None:
    """Raise unless ``W`` is finite, non-negative and sums to 1 or is all zero."""
    if not is_finite(W):
        raise ConfigurationError("Sample weights must be finite")
    if np.any(W < 0):
        raise ConfigurationError("Sample weights must be non-negative")
    total = float(W.sum())
    if total != 0.0 and abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ConfigurationError(f"Sample weights sum to {total!r}, expected 1 or 0")


def broadcast_task_weights(task_weights, n_batch: int) -> SampleWeightMatrix:
    """Spread per-task weights uniformly over a batch and normalize to sum 1."""
    task_weights = np.asarray(task_weights, dtype=np.float64)
    total = task_weights.sum()
    if total <= 0:
        return np.zeros((task_weights.shape[0], n_batch))
    return np.repeat((task_weights / total)[:, None], n_batch, axis=1) / n_batch


# --- SLGrad ---------------------------------------------------------------

def slgrad_raw_scores(grads: np.ndarray, val_grad: Vector, cosine: bool = False) -> np.ndarray:
    """
    Inner products of every per-sample gradient with the meta-gradient.

    With ``cosine`` the products are divided by both norms (ablation only);
    zero-norm pairs score 0.
    """
    val_grad = np.asarray(val_grad, dtype=np.float64)
    if grads.ndim != 3 or grads.shape[2] != val_grad.shape[0]:
        raise ConfigurationError(f"Gradient grid {grads.shape} does not match meta-gradient {val_grad.shape}")
    scores = grads @ val_grad
    if cosine:
        norms = np.linalg.norm(grads, axis=2) * np.linalg.norm(val_grad)
        scores = np.divide(scores, norms, out=np.zeros_like(scores), where=norms > 0)
    return scores


def slgrad_normalize(scores: np.ndarray) -> SampleWeightMatrix:
    """Clamp at zero and divide by the sum of positives; all-zero when nothing is positive."""
    clamped = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    total = clamped.sum()
    if total <= 0:
        return np.zeros_like(clamped)
    return clamped / total


def lookahead_scores(grads: np.ndarray, theta: Vector, meta_value: Callable[[Vector], float], eta: float) -> np.ndarray:
    """
    Explicit look-ahead scores ``(M(theta) - M(theta - eta * g_ij)) / eta``.

    One throwaway update and validation evaluation per (task, sample) pair.
    """
    base = meta_value(theta)
    scores = np.empty(grads.shape[:2])
    for i in range(grads.shape[0]):
        for j in range(grads.shape[1]):
            scores[i, j] = (base - meta_value(theta - eta * grads[i, j])) / eta
    return scores


# --- task-level baselines -------------------------------------------------

def static_weights(n_tasks: int, n_batch: int) -> SampleWeightMatrix:
    if n_tasks < 1 or n_batch < 1:
        raise ConfigurationError(f"Need at least one task and one sample, got {n_tasks}x{n_batch}")
    return np.full((n_tasks, n_batch), 1.0 / (n_tasks * n_batch))


def random_weights(rng: Rng, n_tasks: int, n_batch: int) -> SampleWeightMatrix:
    """Softmax of standard normal draws per task, spread over the batch."""
    task_weights = softmax(rng.standard_normal(n_tasks))
    return np.repeat(task_weights[:, None], n_batch, axis=1) / n_batch


def cossim_task_mask(task_grads: np.ndarray, main_grad: Vector, main_task: int, n_batch: int) -> SampleWeightMatrix:
    """Keep an auxiliary task only while its gradient strictly agrees with the main task's."""
    mask = np.array([
        1.0 if task == main_task or dot(g, main_grad) > 0 else 0.0
        for task, g in enumerate(task_grads)
    ])
    return broadcast_task_weights(mask, n_batch)


@dataclass
class OlAuxState:
    """Auxiliary weights (main task fixed at 1), alignment accumulator and step counter."""

    weights: np.ndarray
    accumulated: np.ndarray
    steps: int = 0

    @classmethod
    def initial(cls, n_tasks: int) -> "OlAuxState":
        return cls(weights=np.ones(n_tasks), accumulated=np.zeros(n_tasks))


def olaux_update(
    state: OlAuxState,
    task_grads: np.ndarray,
    main_grad: Vector,
    main_task: int,
    eta_w: float,
    horizon: int,
) -> np.ndarray:
    """
    Accumulate auxiliary/main gradient alignment; every ``horizon`` steps take
    one ascent step on the auxiliary weights and clamp them at zero.
    """
    if horizon < 1:
        raise ConfigurationError(f"OL-AUX horizon must be at least 1, got {horizon}")
    for task, g in enumerate(task_grads):
        if task != main_task:
            state.accumulated[task] += dot(g, main_grad)
    state.steps += 1
    if state.steps % horizon == 0:
        state.weights = np.maximum(state.weights + eta_w * state.accumulated / horizon, 0.0)
        state.accumulated[:] = 0.0
    state.weights[main_task] = 1.0
    return state.weights.copy()


def pcgrad_project(task_grads: np.ndarray, rng: Rng) -> np.ndarray:
    """
    Project each task gradient off every conflicting original gradient,
    visiting the other tasks in random order. Zero-norm gradients are skipped.
    """
    task_grads = np.asarray(task_grads, dtype=np.float64)
    n_tasks = task_grads.shape[0]
    if n_tasks < 2:
        raise ConfigurationError("PCGrad needs at least two tasks")
    projected = task_grads.copy()
    for i in range(n_tasks):
        g_i = projected[i]
        for j in rng.permutation(n_tasks):
            if j == i:
                continue
            g_j = task_grads[j]
            norm_sq = dot(g_j, g_j)
            if norm_sq == 0.0:
                continue
            conflict = dot(g_i, g_j)
            if conflict < 0:
                g_i -= (conflict / norm_sq) * g_j
    return projected


def pcgrad_combine(task_grads: np.ndarray, rng: Rng) -> Vector:
    """Mean of the PCGrad-projected task gradients."""
    return pcgrad_project(task_grads, rng).mean(axis=0)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    ks = np.arange(1, v.shape[0] + 1)
    rho = np.flatnonzero(u - cumulative / ks > 0)[-1]
    return np.maximum(v - cumulative[rho] / (rho + 1), 0.0)


def cagrad_objective(weights: np.ndarray, gram: np.ndarray, phi: float) -> float:
    """
    Primal form of the CAGrad dual: ``g_w . g_0 + phi * ||g_w||`` for
    ``g_w = sum_i w_i g_i``; the solver minimizes it over the simplex.
    """
    n = gram.shape[0]
    mean_weights = np.full(n, 1.0 / n)
    quad = float(weights @ gram @ weights)
    return float(weights @ gram @ mean_weights) + phi * np.sqrt(max(quad, 0.0))


def solve_cagrad_weights(gram: np.ndarray, phi: float, iters: int) -> np.ndarray:
    """Projected gradient descent with backtracking on the simplex, fixed iteration count."""
    if iters < 1:
        raise ConfigurationError(f"CAGrad needs at least one inner iteration, got {iters}")
    n = gram.shape[0]
    mean_weights = np.full(n, 1.0 / n)
    w = mean_weights.copy()
    value = cagrad_objective(w, gram, phi)
    step = 1.0 / max(float(np.abs(gram).max()), 1e-12)
    for _ in range(iters):
        norm = np.sqrt(max(float(w @ gram @ w), 0.0))
        grad = gram @ mean_weights
        if norm > 0:
            grad = grad + phi * (gram @ w) / norm
        while True:
            candidate = project_simplex(w - step * grad)
            candidate_value = cagrad_objective(candidate, gram, phi)
            if candidate_value <= value or step < 1e-12:
                break
            step *= 0.5
        if candidate_value <= value:
            w, value = candidate, candidate_value
        step *= 2.0
    return w


def cagrad_combine(task_grads: np.ndarray, c: float, iters: int) -> Vector:
    """``g_0 + (phi / ||g_w||) g_w`` with ``phi = c ||g_0||`` and simplex weights from the inner solve."""
    if c < 0:
        raise ConfigurationError(f"CAGrad c must be non-negative, got {c}")
    task_grads = np.asarray(task_grads, dtype=np.float64)
    g0 = task_grads.mean(axis=0)
    if not np.any(task_grads):
        return np.zeros(task_grads.shape[1])
    phi = c * float(np.linalg.norm(g0))
    if phi == 0.0:
        return g0
    gram = task_grads @ task_grads.T
    weights = solve_cagrad_weights(gram, phi, iters)
    g_w = weights @ task_grads
    norm = float(np.linalg.norm(g_w))
    if norm == 0.0:
        return g0
    return g0 + (phi / norm) * g_w


@dataclass
class GradNormState:
    weights: np.ndarray
    initial_losses: np.ndarray | None = None

    @classmethod
    def initial(cls, n_tasks: int) -> "GradNormState":
        return cls(weights=np.ones(n_tasks))


def gradnorm_step(
    state: GradNormState,
    trunk_norms: np.ndarray,
    task_losses: np.ndarray,
    initial_losses: np.ndarray,
    alpha: float,
    eta_w: float,
) -> np.ndarray:
    """
    One descent step on ``sum_i |G_i - mean(G) * r_i**alpha|`` with the targets
    held constant; weights stay positive and are rescaled to sum to N_T.
    """
    trunk_norms = np.asarray(trunk_norms, dtype=np.float64)
    task_losses = np.asarray(task_losses, dtype=np.float64)
    initial_losses = np.asarray(initial_losses, dtype=np.float64)
    if np.any(initial_losses == 0):
        raise ConfigurationError("GradNorm needs non-zero initial task losses")
    n_tasks = state.weights.shape[0]
    G = state.weights * trunk_norms
    ratios = task_losses / initial_losses
    rates = ratios / ratios.mean()
    targets = G.mean() * rates ** alpha
    grad = np.sign(G - targets) * trunk_norms
    weights = np.maximum(state.weights - eta_w * grad, 1e-12)
    state.weights = weights * n_tasks / weights.sum()
    return state.weights.copy()


# --- dispatch ---------------------------------------------------------------

class WeighterOptions(BaseModel):
    """Hyperparameters of every algorithm; each weighter reads its own."""

    main_task: int = 0
    slgrad_cosine: bool = False
    exact_lookahead: bool = False
    olaux_horizon: int = 5
    olaux_lr: float = 1e-3
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    cagrad_c: float = 0.4
    cagrad_iters: int = 20


@dataclass
class StepContext:
    """Everything a weighter may consume at one training step."""

    sample_grads: np.ndarray | None = None
    val_grad: Vector | None = None
    task_losses: np.ndarray | None = None
    trunk: slice | None = None
    theta: Vector | None = None
    lr: float | None = None
    meta_value: Callable[[Vector], float] | None = None
    _task_grads: np.ndarray | None = field(default=None, repr=False)

    @property
    def task_grads(self) -> np.ndarray | None:
        """Per-task gradients of the mean batch loss."""
        if self._task_grads is None and self.sample_grads is not None:
            self._task_grads = self.sample_grads.mean(axis=1)
        return self._task_grads

    @property
    def n_tasks(self) -> int:
        return self.sample_grads.shape[0]

    @property
    def n_batch(self) -> int:
        return self.sample_grads.shape[1]


@dataclass
class StepWeights:
    """Either a sample weight matrix or a combined direction."""

    matrix: SampleWeightMatrix | None = None
    direction: Vector | None = None

    @property
    def skipped(self) -> bool:
        if self.matrix is not None:
            return not np.any(self.matrix)
        return self.direction is not None and not np.any(self.direction)


class BaseWeighter:
    """
    Base class for weighting algorithms.

    Subclasses declare which context fields they consume in ``requires`` and
    whether they keep state across steps.
    """

    name: str = ""
    requires: tuple[str, ...] = ("sample_grads",)
    highly_dynamic: bool = True
    combines_directions: bool = False

    def __init__(self, n_tasks: int, options: WeighterOptions, rng: Rng):
        self.n_tasks = n_tasks
        self.options = options
        self.rng = rng
        self.lookahead_evaluations = 0

    @property
    def main_task(self) -> int:
        return self.options.main_task

    def check_context(self, context: StepContext) -> None:
        missing = [name for name in self.requires if getattr(context, name) is None]
        if missing:
            raise ConfigurationError(f"{self.name} needs {', '.join(missing)} in the step context")

    def compute(self, context: StepContext) -> StepWeights:
        raise NotImplementedError


class SLGradWeighter(BaseWeighter):
    name = "slgrad"
    requires = ("sample_grads", "val_grad")

    def __init__(self, n_tasks, options, rng):
        super().__init__(n_tasks, options, rng)
        if options.exact_lookahead:
            self.requires = ("sample_grads", "val_grad", "theta", "lr", "meta_value")

    def compute(self, context):
        if self.options.exact_lookahead:
            scores = lookahead_scores(context.sample_grads, context.theta, context.meta_value, context.lr)
            self.lookahead_evaluations += scores.size + 1
        else:
            scores = slgrad_raw_scores(context.sample_grads, context.val_grad, cosine=self.options.slgrad_cosine)
        return StepWeights(matrix=slgrad_normalize(scores))


class StaticWeighter(BaseWeighter):
    name = "static"

    def compute(self, context):
        return StepWeights(matrix=static_weights(context.n_tasks, context.n_batch))


class RandomWeighter(BaseWeighter):
    name = "random"
    highly_dynamic = False

    def compute(self, context):
        return StepWeights(matrix=random_weights(self.rng, context.n_tasks, context.n_batch))


class CosSimWeighter(BaseWeighter):
    name = "cossim"

    def compute(self, context):
        grads = context.task_grads
        W = cossim_task_mask(grads, grads[self.main_task], self.main_task, context.n_batch)
        return StepWeights(matrix=W)


class OlAuxWeighter(BaseWeighter):
    name = "olaux"
    highly_dynamic = False

    def __init__(self, n_tasks, options, rng):
        super().__init__(n_tasks, options, rng)
        self.state = OlAuxState.initial(n_tasks)

    def compute(self, context):
        grads = context.task_grads
        weights = olaux_update(
            self.state, grads, grads[self.main_task], self.main_task,
            self.options.olaux_lr, self.options.olaux_horizon,
        )
        return StepWeights(matrix=broadcast_task_weights(weights, context.n_batch))


class GradNormWeighter(BaseWeighter):
    name = "gradnorm"
    requires = ("sample_grads", "task_losses", "trunk")
    highly_dynamic = False

    def __init__(self, n_tasks, options, rng):
        super().__init__(n_tasks, options, rng)
        self.state = GradNormState.initial(n_tasks)

    def compute(self, context):
        if self.state.initial_losses is None:
            self.state.initial_losses = np.asarray(context.task_losses, dtype=np.float64).copy()
        trunk_norms = np.linalg.norm(context.task_grads[:, context.trunk], axis=1)
        weights = gradnorm_step(
            self.state, trunk_norms, context.task_losses, self.state.initial_losses,
            self.options.gradnorm_alpha, self.options.gradnorm_lr,
        )
        return StepWeights(matrix=broadcast_task_weights(weights, context.n_batch))


class PCGradWeighter(BaseWeighter):
    name = "pcgrad"
    combines_directions = True

    def compute(self, context):
        return StepWeights(direction=pcgrad_combine(context.task_grads, self.rng))


class CAGradWeighter(BaseWeighter):
    name = "cagrad"
    combines_directions = True

    def compute(self, context):
        direction = cagrad_combine(context.task_grads, self.options.cagrad_c, self.options.cagrad_iters)
        return StepWeights(direction=direction)


class WeighterRegistry:
    """Registry of weighting algorithms by tag."""

    def __init__(self):
        self._registry: dict[str, Type[BaseWeighter]] = {}

    def register(self, name: str, weighter_class: Type[BaseWeighter]) -> None:
        self._registry[name] = weighter_class

    def get(self, name: str) -> Type[BaseWeighter]:
        try:
            return self._registry[name]
        except KeyError:
            raise ConfigurationError(
                f"Unknown algorithm '{name}', expected one of {', '.join(self.names())}"
            ) from None

    def names(self) -> list[str]:
        return list(self._registry.keys())

    def create(self, name: str, n_tasks: int, options: WeighterOptions, rng: Rng) -> BaseWeighter:
        weighter_class = self.get(name)
        if weighter_class.combines_directions and n_tasks < 2:
            raise ConfigurationError(f"{name} needs at least two tasks")
        return weighter_class(n_tasks, options, rng)


def compute_step_weights(weighter: BaseWeighter, context: StepContext) -> StepWeights:
    """Validate the context for ``weighter`` and run it."""
    weighter.check_context(context)
    result = weighter.compute(context)
    if result.matrix is not None:
        check_weight_matrix(result.matrix)
    return result


# Global registry instance
weighters = WeighterRegistry()
for _weighter in (
    StaticWeighter, RandomWeighter, OlAuxWeighter, PCGradWeighter,
    CAGradWeighter, CosSimWeighter, GradNormWeighter, SLGradWeighter,
):
    weighters.register(_weighter.name, _weighter)

ALGORITHMS = tuple(weighters.names())
