"""
Training loop and run instrumentation.

This module provides:
- train: the weighted SGD loop for every registered weighting algorithm
- RunRecord: evaluation rows, weight summaries, Taylor residuals and run status
- taylor_residual / first_order_deltas: exact versus first-order change of the
  validation objective under one update
- weight_distribution_summary: clean/flagged means and totals of a weight matrix
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datagen import Dataset, generate_classify, generate_toy, next_batch, write_split_csv
from .exceptions import ConfigurationError, DivergenceError
from .models import (
    MtlNetwork,
    ParamVector,
    init_network,
    per_sample_task_gradients,
    sgd_step,
    weighted_total_gradient,
)
from .objectives import MetaObjective, meta_value, task_losses, validation_gradient
from .settings import TrainConfig, dump_config
from .tensor import Vector, derive_rng, dot
from .weighting import StepContext, compute_step_weights, weighters

logger = logging.getLogger(__name__)


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


@dataclass(frozen=True)
class MetricRow:
    step: int
    train_losses: tuple[float, ...]
    val_main: float
    test_main: float


@dataclass(frozen=True)
class WeightRow:
    step: int
    task: int
    mean_clean: float
    mean_flagged: float
    total: float


@dataclass(frozen=True)
class SampleWeightRow:
    step: int
    task: int
    sample: int
    flagged: bool
    weight: float


@dataclass(frozen=True)
class TaylorRow:
    step: int
    exact: float
    approx: float

    @property
    def residual(self) -> float:
        return abs(self.exact - self.approx)


@dataclass
class RunRecord:
    """Everything one training run produced, rows ordered by step."""

    config: TrainConfig
    n_tasks: int
    metrics: list[MetricRow] = field(default_factory=list)
    weights: list[WeightRow] = field(default_factory=list)
    sample_weights: list[SampleWeightRow] = field(default_factory=list)
    taylor: list[TaylorRow] = field(default_factory=list)
    status: str = "ok"
    failure: str | None = None
    best_step: int | None = None
    best_val_main: float = math.inf
    final_test_main: float = math.nan
    steps_run: int = 0
    skipped_updates: int = 0
    lookahead_evaluations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def task_totals(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Mean total weight per task over logged steps in ``[start, stop]``."""
        rows = self._weight_rows(start, stop)
        totals = np.zeros(self.n_tasks)
        counts = np.zeros(self.n_tasks)
        for row in rows:
            totals[row.task] += row.total
            counts[row.task] += 1
        return np.divide(totals, counts, out=np.full(self.n_tasks, math.nan), where=counts > 0)

    def flag_means(self, start: int = 0, stop: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-task (clean, flagged) mean sample weight averaged over logged steps, ignoring empty partitions."""
        clean = [[] for _ in range(self.n_tasks)]
        flagged = [[] for _ in range(self.n_tasks)]
        for row in self._weight_rows(start, stop):
            if not math.isnan(row.mean_clean):
                clean[row.task].append(row.mean_clean)
            if not math.isnan(row.mean_flagged):
                flagged[row.task].append(row.mean_flagged)

        def average(values):
            return np.array([np.mean(v) if v else math.nan for v in values])

        return average(clean), average(flagged)

    def _weight_rows(self, start: int, stop: int | None) -> list[WeightRow]:
        return [r for r in self.weights if r.step >= start and (stop is None or r.step <= stop)]

    def summary(self) -> dict:
        return {
            "status": self.status,
            "failure": self.failure,
            "best_step": self.best_step,
            "final_test_main": self.final_test_main,
            "steps_run": self.steps_run,
            "skipped_updates": self.skipped_updates,
            "lookahead_evaluations": self.lookahead_evaluations,
        }

    def write(self, out: Path) -> None:
        """Write config.conf, metrics.csv, summary.json and the optional diagnostics CSVs."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(self.config, out / "config.conf")

        with open(out / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step"] + [f"train_loss_task_{i}" for i in range(self.n_tasks)] + ["val_main", "test_main"])
            for row in self.metrics:
                writer.writerow([row.step, *map(_fmt, row.train_losses), _fmt(row.val_main), _fmt(row.test_main)])

        if self.config.log_weights:
            with open(out / "weights.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "task", "mean_clean", "mean_flagged", "total"])
                for row in self.weights:
                    writer.writerow([row.step, row.task, _fmt(row.mean_clean), _fmt(row.mean_flagged), _fmt(row.total)])
            with open(out / "sample_weights.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "task", "sample", "flagged", "weight"])
                for row in self.sample_weights:
                    writer.writerow([row.step, row.task, row.sample, int(row.flagged), _fmt(row.weight)])

        if self.config.taylor_check:
            with open(out / "taylor.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "exact", "approx", "residual"])
                for row in self.taylor:
                    writer.writerow([row.step, _fmt(row.exact), _fmt(row.approx), _fmt(row.residual)])

        summary = {k: _json_number(v) for k, v in self.summary().items()}
        with open(out / "summary.json", "w") as f:
            json.dump(summary, f, indent=2)
            f.write("\n")


def _json_number(value):
    if isinstance(value, float):
        return float(_fmt(value)) if math.isfinite(value) else None
    return value


def weight_distribution_summary(W, flags) -> list[dict]:
    """
    Per task: mean weight of clean samples, mean weight of flagged samples and
    the task's total weight. A mean over an empty partition is nan.
    """
    W = np.asarray(W, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim == 1:
        flags = np.tile(flags, (W.shape[0], 1))
    if flags.shape != W.shape:
        raise ConfigurationError(f"Flags {flags.shape} do not align with weight matrix {W.shape}")
    summary = []
    for task in range(W.shape[0]):
        row, flagged = W[task], flags[task]
        summary.append({
            "mean_clean": float(row[~flagged].mean()) if np.any(~flagged) else math.nan,
            "mean_flagged": float(row[flagged].mean()) if np.any(flagged) else math.nan,
            "total": float(row.sum()),
        })
    return summary


def first_order_deltas(
    objective: Callable[[Vector], float],
    theta: Vector,
    meta_grad: Vector,
    direction: Vector,
    eta: float,
) -> tuple[float, float]:
    """
    ``(objective(theta - eta * direction) - objective(theta), -eta * meta_grad . direction)``.

    The first entry needs one throwaway update; it is a diagnostic only.
    """
    if eta == 0.0 or not np.any(direction):
        return 0.0, 0.0
    exact = objective(theta - eta * direction) - objective(theta)
    approx = -eta * dot(meta_grad, direction)
    return float(exact), float(approx)


def taylor_residual(
    net: MtlNetwork,
    grads: np.ndarray,
    weights: np.ndarray,
    val_batch,
    loss_specs,
    meta: MetaObjective,
    eta: float,
) -> tuple[float, float]:
    """Exact and first-order change of the validation objective under the weighted update."""
    direction = weighted_total_gradient(grads, weights)
    theta = net.flatten()
    meta_grad = validation_gradient(net, val_batch, loss_specs, meta)

    def objective(params: ParamVector) -> float:
        return meta_value(net.with_parameters(params), val_batch, loss_specs, meta)

    return first_order_deltas(objective, theta, meta_grad, direction, eta)


def build_dataset(config: TrainConfig) -> Dataset:
    if config.dataset == "toy":
        return generate_toy(config.toy_spec())
    return generate_classify(config.classify_spec())


def export_dataset(dataset: Dataset, out: Path) -> None:
    out = Path(out)
    for split in (dataset.train, dataset.val, dataset.test):
        write_split_csv(split, out / f"{split.name}.csv")
    logger.info("Wrote %s dataset splits to %s", dataset.name, out)


def _check_losses(step: int, losses, threshold: float) -> None:
    for value in np.atleast_1d(losses):
        if not math.isfinite(value) or value > threshold:
            raise DivergenceError(step, float(value), threshold)


class Trainer:
    """
    One run: owns the network, the weighter and the random streams.

    ``run`` executes the loop; every stream is derived from the config seed, so
    two trainers built from equal configs produce identical records.
    """

    def __init__(self, config: TrainConfig, dataset: Dataset | None = None):
        self.config = config
        self.dataset = dataset if dataset is not None else build_dataset(config)
        self.meta = MetaObjective(main_task=self.dataset.main_task)
        self.loss_specs = self.dataset.loss_specs
        arch = config.architecture(self.dataset.input_dim, self.dataset.output_dims)
        self.net = init_network(arch, derive_rng(config.seed, "init"))
        self.batch_rng = derive_rng(config.seed, "batching")
        self.val_rng = derive_rng(config.seed, "validation")
        stream = "pcgrad" if config.algorithm == "pcgrad" else "weighting"
        self.weighter = weighters.create(
            config.algorithm,
            self.dataset.n_tasks,
            config.weighter_options(self.dataset.main_task),
            derive_rng(config.seed, stream),
        )
        self.record = RunRecord(config=config, n_tasks=self.dataset.n_tasks)

    def run(self) -> RunRecord:
        config, record = self.config, self.record
        logger.info(
            "Training %s on %s (seed %d, %d parameters, %d steps)",
            config.algorithm, self.dataset.name, config.seed, self.net.n_parameters, config.steps,
        )
        try:
            self._evaluate(0)
            for step in range(1, config.steps + 1):
                self._step(step)
                record.steps_run = step
                if step % config.eval_every == 0 or step == config.steps:
                    self._evaluate(step)
                    if self._should_stop(step):
                        logger.info("Early stop at step %d (best validation at step %d)", step, record.best_step)
                        break
        except DivergenceError as e:
            record.status = "diverged"
            record.failure = str(e)
            logger.warning("Run diverged: %s", e)
        record.lookahead_evaluations = self.weighter.lookahead_evaluations
        return record

    def _needs_val_grad(self) -> bool:
        return "val_grad" in self.weighter.requires or self.config.taylor_check

    def _val_batch(self):
        size = self.config.effective_val_batch_size()
        if size is None:
            return self.dataset.val.as_batch()
        return next_batch(self.dataset.val, size, self.val_rng)

    def _step(self, step: int) -> None:
        config, record = self.config, self.record
        batch = next_batch(self.dataset.train, config.batch_size, self.batch_rng)
        val_batch = self._val_batch()
        net = self.net

        losses = task_losses(net, batch, self.loss_specs)
        _check_losses(step, losses, config.divergence_threshold)
        val_grad = validation_gradient(net, val_batch, self.loss_specs, self.meta) if self._needs_val_grad() else None
        grads = per_sample_task_gradients(net, batch, self.loss_specs)
        theta = net.flatten()

        def objective(params: ParamVector) -> float:
            return meta_value(net.with_parameters(params), val_batch, self.loss_specs, self.meta)

        context = StepContext(
            sample_grads=grads,
            val_grad=val_grad,
            task_losses=losses,
            trunk=net.layout.trunk,
            theta=theta,
            lr=config.lr,
            meta_value=objective,
        )
        result = compute_step_weights(self.weighter, context)
        if result.direction is not None:
            direction = result.direction
        else:
            direction = weighted_total_gradient(grads, result.matrix)
            if config.log_weights:
                self._log_weights(step, result.matrix, batch)

        if config.taylor_check:
            exact, approx = first_order_deltas(objective, theta, val_grad, direction, config.lr)
            record.taylor.append(TaylorRow(step, exact, approx))

        if result.skipped:
            record.skipped_updates += 1
            logger.debug("Step %d: all weights clamped, update skipped", step)
            return
        self.net = net.with_parameters(sgd_step(theta, direction, config.lr))

    def _log_weights(self, step: int, W: np.ndarray, batch) -> None:
        record = self.record
        summary = weight_distribution_summary(W, batch.corrupted)
        for task, row in enumerate(summary):
            record.weights.append(WeightRow(step, task, row["mean_clean"], row["mean_flagged"], row["total"]))
        logger.debug("Step %d task weight totals: %s", step, [round(row["total"], 4) for row in summary])
        if step % self.config.eval_every == 0:
            for task in range(W.shape[0]):
                for j in range(W.shape[1]):
                    record.sample_weights.append(
                        SampleWeightRow(step, task, int(batch.indices[j]), bool(batch.corrupted[task, j]), float(W[task, j]))
                    )

    def _evaluate(self, step: int) -> None:
        record, data = self.record, self.dataset
        train_losses = task_losses(self.net, data.train.as_batch(), self.loss_specs)
        val_main = meta_value(self.net, data.val.as_batch(), self.loss_specs, self.meta)
        test_main = meta_value(self.net, data.test.as_batch(), self.loss_specs, self.meta)
        _check_losses(step, [*train_losses, val_main, test_main], self.config.divergence_threshold)
        record.metrics.append(MetricRow(step, tuple(float(v) for v in train_losses), val_main, test_main))
        if val_main < record.best_val_main:
            record.best_val_main = val_main
            record.best_step = step
            record.final_test_main = test_main
        logger.info(
            "step %d train %s val_main %.6g test_main %.6g",
            step, " ".join(f"{v:.6g}" for v in train_losses), val_main, test_main,
        )

    def _should_stop(self, step: int) -> bool:
        patience = self.config.patience
        return bool(patience) and step - self.record.best_step >= patience


def train(config: TrainConfig, dataset: Dataset | None = None) -> RunRecord:
    """Run one training job; writes its outputs when ``config.out`` is set."""
    record = Trainer(config, dataset).run()
    if config.out:
        record.write(Path(config.out))
    return record
