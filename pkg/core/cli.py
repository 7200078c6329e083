"""
Command line entry point: ``slgrad {train,suite,grid,plot}``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .exceptions import ConfigurationError, SLGradError
from .plotting import plot_run
from .settings import TrainConfig, configure_logging, load_config, parse_value, tuned_hyperparameters
from .suite import grid_search, run_suite
from .trainer import Trainer, export_dataset

logger = logging.getLogger(__name__)

# argparse dest -> TrainConfig field
OVERRIDES = (
    "algorithm", "dataset", "noise", "aux_noise", "flip", "flip_frac", "lr",
    "batch_size", "val_batch_size", "steps", "seed", "data_seed", "noise_mode", "out", "taylor_check",
    "log_weights", "exact_lookahead", "slgrad_cosine",
)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _grid_entry(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=v1,v2,..., got '{text}'")
    key, values = text.split("=", 1)
    return key.strip(), [parse_value(v) for v in values.split(",")]


def add_config_arguments(parser: argparse.ArgumentParser, multiple_configs: bool = False) -> None:
    if multiple_configs:
        parser.add_argument("--config", type=Path, action="append", help="config file (repeatable)")
    else:
        parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--algorithm", help="weighting algorithm tag")
    parser.add_argument("--dataset", choices=["toy", "classify"])
    parser.add_argument("--noise", type=float, help="fraction of corrupted training targets (toy)")
    parser.add_argument("--aux-noise", type=float, dest="aux_noise", help="noise fraction of auxiliary tasks (toy)")
    parser.add_argument("--flip", choices=["none", "uniform", "background"])
    parser.add_argument("--flip-frac", type=float, dest="flip_frac")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--val-batch-size", type=int, dest="val_batch_size", help="0 uses the full validation split")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--data-seed", type=int, dest="data_seed", help="seed of the dataset draw (defaults to --seed)")
    parser.add_argument("--noise-mode", choices=["shared", "sample"], dest="noise_mode")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--taylor-check", action="store_const", const=True, dest="taylor_check")
    parser.add_argument("--log-weights", action="store_const", const=True, dest="log_weights")
    parser.add_argument("--exact-lookahead", action="store_const", const=True, dest="exact_lookahead")
    parser.add_argument("--slgrad-cosine", action="store_const", const=True, dest="slgrad_cosine")
    parser.add_argument(
        "--tuned-hyperparameters",
        action="store_true",
        help="use the tuned toy lr, batch size and depths of each algorithm",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slgrad", description="Sample-level weighting for multi-task learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="run one training job")
    add_config_arguments(train_parser)
    train_parser.add_argument("--export-data", action="store_true", help="write train/val/test CSVs to --out")

    suite_parser = commands.add_parser("suite", help="run configs across seeds")
    add_config_arguments(suite_parser, multiple_configs=True)
    suite_parser.add_argument("--algorithms", help="comma-separated algorithms; each config is run with every one")
    suite_parser.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    suite_parser.add_argument("--workers", type=int, default=1)

    grid_parser = commands.add_parser("grid", help="exhaustive grid search")
    add_config_arguments(grid_parser)
    grid_parser.add_argument("--grid", type=_grid_entry, action="append", required=True, help="key=v1,v2,...")
    grid_parser.add_argument("--seeds", type=_int_list, default=[])
    grid_parser.add_argument("--workers", type=int, default=1)

    plot_parser = commands.add_parser("plot", help="render figures from a run directory")
    plot_parser.add_argument("run_dir", type=Path)
    plot_parser.add_argument("--out", type=Path)
    return parser


def config_from_args(args: argparse.Namespace, path: Path | None, algorithm: str | None = None) -> TrainConfig:
    """File values, then tuned hyperparameters, then explicit flags."""
    overrides = {name: getattr(args, name, None) for name in OVERRIDES}
    if algorithm is not None:
        overrides["algorithm"] = algorithm
    if args.tuned_hyperparameters:
        base = load_config(path, {"algorithm": overrides["algorithm"]})
        tuned = tuned_hyperparameters(base.algorithm)
        overrides = {**tuned, **{k: v for k, v in overrides.items() if v is not None}}
    return load_config(path, overrides)


def cmd_train(args) -> int:
    config = config_from_args(args, args.config)
    trainer = Trainer(config)
    if args.export_data:
        if not config.out:
            raise ConfigurationError("--export-data needs --out")
        export_dataset(trainer.dataset, Path(config.out))
    record = trainer.run()
    if config.out:
        record.write(Path(config.out))
    print(json.dumps(record.summary(), indent=2))
    return 0 if record.ok else 1


def cmd_suite(args) -> int:
    paths = args.config or [None]
    algorithms = args.algorithms.split(",") if args.algorithms else [None]
    configs = [config_from_args(args, path, algorithm) for path in paths for algorithm in algorithms]
    out = Path(args.out) if args.out else None
    results = run_suite([c.replace(out=None) for c in configs], args.seeds, workers=args.workers, out=out)
    print(json.dumps([r.as_row() for r in results], indent=2))
    return 0


def cmd_grid(args) -> int:
    base = config_from_args(args, args.config)
    out = Path(args.out) if args.out else None
    result = grid_search(base.replace(out=None), dict(args.grid), seeds=args.seeds, workers=args.workers, out=out)
    print(json.dumps({key: getattr(result.best, key) for key, _ in args.grid}, indent=2))
    return 0


def cmd_plot(args) -> int:
    for path in plot_run(args.run_dir, args.out):
        print(path)
    return 0


COMMANDS = {"train": cmd_train, "suite": cmd_suite, "grid": cmd_grid, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except SLGradError as e:
        print(f"slgrad: error: {e}", file=sys.stderr)
        return 2
