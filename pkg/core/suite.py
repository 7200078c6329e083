"""
Multi-seed suites and exhaustive grid search over TrainConfig fields.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError
from .settings import TrainConfig
from .trainer import train

logger = logging.getLogger(__name__)


@dataclass
class RunOutcome:
    seed: int
    status: str
    final_test_main: float
    best_val_main: float
    failure: str | None = None


@dataclass
class SuiteResult:
    """Mean and sample standard deviation of the final test metric across seeds."""

    algorithm: str
    setting: str
    mean: float
    std: float
    seeds: list[int]
    failures: list[dict] = field(default_factory=list)
    runs: list[RunOutcome] = field(default_factory=list)

    def as_row(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "setting": self.setting,
            "mean": self.mean,
            "std": self.std,
            "seeds": self.seeds,
            "failures": self.failures,
        }


def seed_statistics(values) -> tuple[float, float]:
    """Mean and std with n - 1 in the denominator; std is 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1))


def _run_one(config: TrainConfig) -> RunOutcome:
    record = train(config)
    return RunOutcome(
        seed=config.seed,
        status=record.status,
        final_test_main=record.final_test_main,
        best_val_main=record.best_val_main,
        failure=record.failure,
    )


def _seeded(config: TrainConfig, seed: int, out: Path | None) -> TrainConfig:
    run_out = None
    if out is not None:
        run_out = str(Path(out) / config.algorithm / config.setting_label() / f"seed{seed}")
    return config.replace(seed=seed, out=run_out)


def _execute(configs: list[TrainConfig], workers: int) -> list[RunOutcome]:
    if workers <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, configs))


def run_suite(
    configs: list[TrainConfig],
    seeds: list[int],
    workers: int = 1,
    out: Path | None = None,
) -> list[SuiteResult]:
    """
    Run every config under every seed and aggregate per (algorithm, setting).

    A diverged run is listed under ``failures`` and left out of the statistics.
    """
    if not configs:
        raise ConfigurationError("A suite needs at least one config")
    if not seeds:
        raise ConfigurationError("A suite needs at least one seed")

    jobs = [_seeded(c, seed, out) for c in configs for seed in seeds]
    logger.info("Running suite: %d configs x %d seeds", len(configs), len(seeds))
    outcomes = _execute(jobs, workers)

    groups: dict[tuple[str, str], list[RunOutcome]] = {}
    for job, outcome in zip(jobs, outcomes):
        groups.setdefault((job.algorithm, job.setting_label()), []).append(outcome)

    results = []
    for (algorithm, setting), runs in groups.items():
        finished = [r for r in runs if r.status == "ok"]
        mean, std = seed_statistics([r.final_test_main for r in finished])
        failures = [{"seed": r.seed, "status": r.status, "failure": r.failure} for r in runs if r.status != "ok"]
        results.append(SuiteResult(algorithm, setting, mean, std, [r.seed for r in runs], failures, runs))
        logger.info("%s / %s: %.6g +- %.3g (%d failed)", algorithm, setting, mean, std, len(failures))

    if out is not None:
        write_suite_summary(results, Path(out) / "summary.json")
    return results


def write_suite_summary(results: list[SuiteResult], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [_rounded_row(r) for r in results]
    with open(path, "w") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


def _rounded(value: float):
    return float(format(value, ".9g")) if math.isfinite(value) else None


def _rounded_row(result: SuiteResult) -> dict:
    row = result.as_row()
    row["mean"] = _rounded(row["mean"])
    row["std"] = _rounded(row["std"])
    return row


def expand_grid(base: TrainConfig, grid: dict[str, list]) -> list[TrainConfig]:
    """Every combination of the grid values applied to ``base``, in grid order."""
    if not grid or any(not values for values in grid.values()):
        raise ConfigurationError("Grid search needs at least one value per grid key")
    unknown = [key for key in grid if key not in TrainConfig.model_fields]
    if unknown:
        raise ConfigurationError(f"Unknown grid keys: {', '.join(unknown)}")
    keys = list(grid)
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class GridResult:
    best: TrainConfig
    scores: list[tuple[dict, float]]
    suite: list[SuiteResult] = field(default_factory=list)


def grid_search(
    base: TrainConfig,
    grid: dict[str, list],
    seeds: list[int] | None = None,
    workers: int = 1,
    out: Path | None = None,
) -> GridResult:
    """
    Select the grid point with the lowest best validation main-task loss on
    ``base.seed``, then re-run it on the remaining ``seeds``.

    Ties keep the earliest grid point; diverged points are never selected.
    """
    candidates = expand_grid(base, grid)
    outcomes = _execute([c.replace(out=None) for c in candidates], workers)

    scores = []
    best_index, best_score = None, math.inf
    for index, (candidate, outcome) in enumerate(zip(candidates, outcomes)):
        point = {key: getattr(candidate, key) for key in grid}
        score = outcome.best_val_main if outcome.status == "ok" else math.inf
        scores.append((point, score))
        logger.info("grid %s: validation %.6g (%s)", point, score, outcome.status)
        if score < best_score:
            best_index, best_score = index, score

    if best_index is None:
        raise ConfigurationError("Every grid point diverged")
    best = candidates[best_index]
    logger.info("Selected %s", scores[best_index][0])

    result = GridResult(best=best, scores=scores)
    remaining = [s for s in (seeds or []) if s != base.seed]
    if remaining:
        result.suite = run_suite([best], remaining, workers=workers, out=out)
    if out is not None:
        _write_grid_scores(result, Path(out) / "grid.json")
    return result


def _write_grid_scores(result: GridResult, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "best": {key: getattr(result.best, key) for key in result.scores[0][0]},
        "scores": [{"point": point, "val_main": _rounded(score)} for point, score in result.scores],
        "suite": [_rounded_row(r) for r in result.suite],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
