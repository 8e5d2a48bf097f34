"""
Command-line entry point.

Usage:
    python -m longicause train --config run.json --seeds 1,2,3 --set model.lambda_ipm=0
    python -m longicause gradcheck
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch
from pydantic import ValidationError as PydanticValidationError

from longicause.config import settings
from longicause.core.exceptions import EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, ConfigurationError, LongicauseError
from longicause.core.logging_config import cleanup_old_logs, setup_logging
from longicause.schemas.run import COMMANDS, RunConfig
from longicause.services.experiment_service import ExperimentService, parse_override

logger = logging.getLogger(__name__)


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds must be a comma-separated list of integers, got '{text}'")
    if not seeds:
        raise ConfigurationError("--seeds must not be empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longicause",
        description="Counterfactual regression for longitudinal panels (CDVAE)",
    )
    parser.add_argument("--version", action="version", version=f"{settings.PROJECT_NAME} {settings.VERSION}")
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", type=Path, default=None, help="JSON run config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted override, e.g. train.max_epochs=5 (repeatable)",
    )
    parser.add_argument("--seeds", default=None, help="Comma-separated seeds, e.g. 1,2,3")
    parser.add_argument("--out", type=Path, default=None, help=f"Output root (default {settings.OUTPUT_DIR})")
    parser.add_argument("--log-dir", default=None, help=f"Process log directory (default {settings.LOG_DIR})")
    return parser


def build_run_config(args: argparse.Namespace) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.overrides)
    try:
        return RunConfig(
            command=args.command,
            config_path=args.config,
            out_dir=args.out,
            seeds=parse_seeds(args.seeds) if args.seeds is not None else None,
            overrides=overrides,
        )
    except PydanticValidationError as e:
        raise ConfigurationError(f"invalid command line: {e.errors()[0]['msg']}")


def dispatch(run: RunConfig) -> int:
    """
    Run one command and map the outcome to an exit status.

    Returns:
        0 on success, 1 on validation errors, 2 on numeric failures or unexpected errors
    """
    try:
        result = ExperimentService.run(run)
    except LongicauseError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {str(e)}")
        return EXIT_NUMERIC

    if result.summary:
        logger.info(f"Summary: {result.summary}")
    print(result.run_dir)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_dir)
    cleanup_old_logs(args.log_dir)
    if settings.TORCH_NUM_THREADS > 0:
        torch.set_num_threads(settings.TORCH_NUM_THREADS)
    try:
        run = build_run_config(args)
    except LongicauseError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        return EXIT_VALIDATION
    return dispatch(run)


if __name__ == "__main__":
    sys.exit(main())
