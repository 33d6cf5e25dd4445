"""``chm`` command line: simulation sweeps and DML runs on CSV files."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import signal
import sys

from src.chm.config import (
    PAPER_SCALE_REPLICATIONS,
    ConfigError,
    ExperimentConfig,
    config_id,
    load_config,
)
from src.chm.dataset import DatasetError, RoleError
from src.chm.experiments import run_lue_simulation, run_on_csv, run_q10_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chm", description="Causal hybrid modeling with double machine learning"
    )
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to YAML experiment config")
    common.add_argument("--seed", type=int, help="Override the base seed")
    common.add_argument("--out", help="Override the output directory")
    common.add_argument("--folds", type=int, help="Override the number of cross-fitting folds")

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--jobs", type=int, default=1, help="Parallel replications")
    sweep.add_argument("--resume", action="store_true", help="Skip completed runs")
    sweep.add_argument(
        "--paper-scale",
        action="store_true",
        help=f"Use {PAPER_SCALE_REPLICATIONS} replications",
    )

    sub.add_parser("q10-sim", parents=[common, sweep], help="Q10 recovery simulation")
    sub.add_parser("lue-sim", parents=[common, sweep], help="Flux-partitioning noise sweep")
    run = sub.add_parser("run", parents=[common], help="DML fit on a CSV file")
    run.add_argument("--csv", help="Input CSV (overrides csv_path)")
    return parser


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Apply command-line overrides to a validated config."""
    changes: dict = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.folds is not None:
        if args.folds < 2:
            raise ConfigError(f"--folds must be >= 2, got {args.folds}")
        changes["k_folds"] = args.folds
    if getattr(args, "paper_scale", False):
        changes["replications"] = PAPER_SCALE_REPLICATIONS
    if getattr(args, "csv", None):
        changes["csv_path"] = args.csv
    return dataclasses.replace(cfg, **changes)


def _dispatch(args: argparse.Namespace, cfg: ExperimentConfig, cfg_hash: str) -> int:
    if args.command == "run":
        run_on_csv(cfg, config_hash=cfg_hash)
        return EXIT_OK
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    runner = run_q10_simulation if args.command == "q10-sim" else run_lue_simulation
    result = runner(cfg, jobs=args.jobs, resume=args.resume, config_hash=cfg_hash)
    if result.n_failed:
        logger.warning(
            "%d of %d runs failed; see %s", result.n_failed, len(result.records), result.runs_path
        )
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """CLI entry point for chm."""
    args = _build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    def handle_signal(signum: int, frame: object) -> None:
        logger.info("Received signal %d, stopping (rerun with --resume to continue)", signum)
        sys.exit(130)

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)

    try:
        cfg = apply_overrides(load_config(args.config), args)
        cfg_hash = config_id(args.config)
    except FileNotFoundError as exc:
        logger.error("Failed to load config: %s", exc)
        return EXIT_FATAL
    except ConfigError as exc:
        logger.error("Invalid config: %s", exc)
        return EXIT_CONFIG

    try:
        return _dispatch(args, cfg, cfg_hash)
    except (ConfigError, RoleError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except DatasetError as exc:
        logger.error("Data error: %s", exc)
        return EXIT_FATAL
    except Exception as exc:
        logger.error("Run failed: %s", exc, exc_info=args.verbose)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
