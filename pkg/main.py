#!/usr/bin/env python3
"""
Command-line driver for the HMC swindles toolkit.

Usage:
  python3 main.py fit     --config swindles.config.json [--seed N] [--out DIR]
  python3 main.py sample  --config swindles.config.json [--replications N] [--save-traces]
  python3 main.py sweep   --config swindles.config.json
  python3 main.py predict --config swindles.config.json

Exit codes: 0 ok, 1 configuration error, 2 numerical failure, 3 stationarity warning.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from swindle_experiments.experiment_runner import CommandResult, ExperimentContext, ExperimentRunner
from swindle_utils.errors import ConfigError, SwindleError
from swindle_utils.experiment_config import DEFAULT_CONFIG_PATH, ExperimentConfig, load_experiment_config

COMMANDS = ("fit", "sample", "sweep", "predict")


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=False, show_path=False)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swindles", description="HMC swindles experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help=f"experiment config (default {DEFAULT_CONFIG_PATH})")
        cmd.add_argument("--experiment", default=None, help="experiment key inside a multi-experiment file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--replications", type=int, default=None)
        cmd.add_argument("--log-level", default=os.getenv("SWINDLES_LOG_LEVEL", "INFO"))
        if name == "sample":
            cmd.add_argument("--save-traces", action="store_true", help="write traces.csv/.npz for replication 0")
    return parser


def apply_cli_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.replications is not None:
        if args.replications < 1:
            raise ConfigError("--replications must be positive")
        updates["replications"] = args.replications
    return config.model_copy(update=updates) if updates else config


def run(argv: Optional[List[str]] = None, console: Optional[Console] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    console = console or Console()
    try:
        config = apply_cli_overrides(load_experiment_config(args.config, args.experiment), args)
        context = ExperimentContext(
            config=config,
            out_dir=Path(config.out_dir),
            console=console,
            save_traces=getattr(args, "save_traces", False),
        )
        runner = ExperimentRunner(context)
        result: CommandResult = getattr(runner, f"cmd_{args.command}")()
    except SwindleError as exc:
        console.print(f"❌ {type(exc).__name__}: {exc}")
        return exc.exit_code
    return result.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
