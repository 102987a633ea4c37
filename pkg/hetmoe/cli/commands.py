"""
Command-line entry points: train, adapt, expand, eval and gradcheck.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from hetmoe import __version__
from hetmoe.core.exceptions import ConfigError, HetMoEError, MissingEntityError
from hetmoe.core.logging import setup_logging
from hetmoe.models.schemas import RunConfig, Split
from hetmoe.network.model import HeterogeneousModel
from hetmoe.services.adaptation_service import run_continual, run_plan
from hetmoe.services.checkpoint_service import checkpoint_digest, load_checkpoint, save_checkpoint
from hetmoe.services.metrics_service import MetricsSink, summarize_metrics
from hetmoe.services.training_service import Trainer, TrainState, evaluate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def load_run_config(path: str, seed: Optional[int] = None) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    Args:
        path: Config file path
        seed: Optional override of the training and adaptation seeds

    Returns:
        RunConfig: the validated configuration
    """
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {config_path}: {e}") from e
    config = RunConfig.model_validate_json(text)
    if seed is not None:
        update = {"train": config.train.model_copy(update={"seed": seed})}
        if config.adapt is not None:
            budget = config.adapt.budget.model_copy(update={"seed": seed})
            update["adapt"] = config.adapt.model_copy(update={"budget": budget})
        if config.continual is not None:
            budget = config.continual.budget.model_copy(update={"seed": seed})
            update["continual"] = config.continual.model_copy(update={"budget": budget})
        config = config.model_copy(update=update)
    return config


def _emit(payload: str) -> None:
    sys.stdout.write(payload + "\n")
    sys.stdout.flush()


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.seed)
    model = HeterogeneousModel(config.model, seed=config.train.seed)
    for spec in config.datasets:
        model.register_dataset(spec)
    state = TrainState.start(config.train)

    with MetricsSink(args.metrics) as sink:
        Trainer(model, config.datasets, config.train, state=state, sink=sink).run()
    digest = save_checkpoint(args.out, model, config, state)

    if args.metrics:
        for row in summarize_metrics(args.metrics).iter_rows(named=True):
            logger.info(
                f"dataset {row['dataset_id']}: {row['steps']} steps ({row['share']:.3f}), "
                f"mean task loss {row['mean_task_loss']:.4f}"
            )
    _emit(json.dumps({"checkpoint": str(args.out), "sha256": digest, "iterations": state.iteration}))
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = load_run_config(args.config, args.seed)
    if config.adapt is None:
        raise ConfigError(f"config {args.config} has no 'adapt' section")

    report = run_plan(checkpoint.model, config.adapt)
    echo = checkpoint.config.model_copy(update={"adapt": config.adapt})
    digest = save_checkpoint(args.out, checkpoint.model, echo)
    if args.report:
        Path(args.report).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    _emit(report.model_dump_json())
    _emit(json.dumps({"checkpoint": str(args.out), "sha256": digest}))
    return EXIT_OK


def cmd_expand(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = load_run_config(args.config, args.seed)
    if config.continual is None or not config.continual.tasks:
        raise ConfigError(f"config {args.config} has no 'continual' tasks")

    reports = run_continual(checkpoint.model, config.continual)
    echo = checkpoint.config.model_copy(update={"continual": config.continual})
    digest = save_checkpoint(args.out, checkpoint.model, echo)
    for report in reports:
        _emit(report.model_dump_json())
    _emit(json.dumps({"checkpoint": str(args.out), "sha256": digest}))
    return EXIT_OK


def _select_datasets(selector: Optional[str], available: Sequence[int]) -> List[int]:
    if selector is None or selector == "all":
        return list(available)
    try:
        wanted = [int(part) for part in selector.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"dataset selector must be 'all' or comma-separated ids, got '{selector}'") from None
    missing = [i for i in wanted if i not in available]
    if missing:
        raise MissingEntityError(f"datasets {missing} are not in the checkpoint (available: {list(available)})")
    return wanted


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.model
    for dataset_id in _select_datasets(args.datasets, model.dataset_ids):
        _emit(evaluate(model, model.specs[dataset_id], args.split).model_dump_json())
    _emit(json.dumps({"checkpoint": str(args.checkpoint), "sha256": checkpoint_digest(args.checkpoint)}))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from hetmoe.autograd.gradcheck import run_battery

    results = run_battery(seed=args.seed or 0, points=args.points, model_points=args.points)
    for result in results:
        _emit(json.dumps({**asdict(result), "passed": result.passed}))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetmoe",
        description="Heterogeneous mixture-of-experts training, adaptation and expansion",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Heterogeneous pretraining")
    train.add_argument("--config", required=True, help="Run configuration (JSON)")
    train.add_argument("--out", required=True, help="Checkpoint to write")
    train.add_argument("--metrics", help="Newline-delimited JSON metrics file")
    train.add_argument("--seed", type=int, help="Override the configured seed")
    train.set_defaults(handler=cmd_train)

    adapt = sub.add_parser("adapt", help="Run an adaptation plan against a checkpoint")
    adapt.add_argument("--checkpoint", required=True)
    adapt.add_argument("--config", required=True, help="Config with an 'adapt' section")
    adapt.add_argument("--out", required=True, help="Adapted checkpoint to write")
    adapt.add_argument("--report", help="Also write the adaptation report to this file")
    adapt.add_argument("--seed", type=int, help="Override the adaptation seed")
    adapt.set_defaults(handler=cmd_adapt)

    expand = sub.add_parser("expand", help="Continual learning by expert expansion")
    expand.add_argument("--checkpoint", required=True)
    expand.add_argument("--config", required=True, help="Config with a 'continual' section")
    expand.add_argument("--out", required=True, help="Expanded checkpoint to write")
    expand.add_argument("--seed", type=int, help="Override the continual budget seed")
    expand.set_defaults(handler=cmd_expand)

    ev = sub.add_parser("eval", help="Evaluate registered datasets")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--datasets", default="all", help="'all' or comma-separated dataset ids")
    ev.add_argument("--split", default=Split.TEST.value, choices=[s.value for s in Split])
    ev.set_defaults(handler=cmd_eval)

    gc = sub.add_parser("gradcheck", help="Finite-difference gradient battery")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--points", type=int, default=20, help="Random points per case")
    gc.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit status."""
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except HetMoEError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_CONFIG
