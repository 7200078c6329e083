"""
Figures from a run directory's CSV outputs.

- learning_curves.png: per-task training loss and main-task validation/test loss
- task_weights.png: total weight per task over steps (needs weights.csv)
- weight_histograms.png: per-sample weights, clean versus flagged (needs sample_weights.csv)
"""

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # non-interactive
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .exceptions import ConfigurationError  # noqa: E402

logger = logging.getLogger(__name__)


def read_csv_columns(path: Path) -> dict[str, np.ndarray]:
    """Columns of a numeric CSV keyed by header name."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ConfigurationError(f"{path} is empty")
        rows = [[float(v) for v in row] for row in reader]
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: values[:, k] for k, name in enumerate(header)}


def plot_learning_curves(metrics: dict[str, np.ndarray], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = metrics["step"]
    for name in sorted(k for k in metrics if k.startswith("train_loss_task_")):
        ax.plot(steps, metrics[name], label=name.replace("train_loss_", "train "), alpha=0.7)
    ax.plot(steps, metrics["val_main"], label="validation (main)", color="black", linestyle="--")
    ax.plot(steps, metrics["test_main"], label="test (main)", color="black")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_task_weights(weights: dict[str, np.ndarray], path: Path, window: int = 20) -> Path:
    """Total task weight per step, smoothed with a trailing moving average."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    tasks = np.unique(weights["task"]).astype(int)
    for task in tasks:
        mask = weights["task"] == task
        steps, totals = weights["step"][mask], weights["total"][mask]
        if totals.size >= window:
            kernel = np.ones(window) / window
            totals = np.convolve(totals, kernel, mode="valid")
            steps = steps[window - 1:]
        ax.plot(steps, totals, label="main task" if task == 0 else f"auxiliary task {task}")
    ax.set_xlabel("step")
    ax.set_ylabel("total task weight")
    ax.set_ylim(bottom=0.0)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_weight_histograms(sample_weights: dict[str, np.ndarray], path: Path, bins: int = 30) -> Path:
    """One panel per task: histogram of sample weights split by corruption flag."""
    tasks = np.unique(sample_weights["task"]).astype(int)
    fig, axes = plt.subplots(1, len(tasks), figsize=(4 * len(tasks), 3.5), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        mask = sample_weights["task"] == task
        w = sample_weights["weight"][mask]
        flagged = sample_weights["flagged"][mask] > 0
        edges = np.linspace(0.0, max(float(w.max()), 1e-12), bins + 1)
        ax.hist(w[~flagged], bins=edges, alpha=0.6, label="clean")
        if np.any(flagged):
            ax.hist(w[flagged], bins=edges, alpha=0.6, label="flagged")
        ax.set_title("main task" if task == 0 else f"auxiliary task {task}")
        ax.set_xlabel("sample weight")
        ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_run(run_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Render every figure whose source CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise ConfigurationError(f"No metrics.csv in {run_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    written = [plot_learning_curves(read_csv_columns(metrics_path), out_dir / "learning_curves.png")]
    weights_path = run_dir / "weights.csv"
    if weights_path.exists():
        weights = read_csv_columns(weights_path)
        if weights["step"].size:
            written.append(plot_task_weights(weights, out_dir / "task_weights.png"))
    samples_path = run_dir / "sample_weights.csv"
    if samples_path.exists():
        samples = read_csv_columns(samples_path)
        if samples["step"].size:
            written.append(plot_weight_histograms(samples, out_dir / "weight_histograms.png"))
    for path in written:
        logger.info("Wrote %s", path)
    return written
