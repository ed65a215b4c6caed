"""Command line entry point."""

import argparse
import logging
import os
import sys
import typing as t
from enum import IntEnum
from pathlib import Path

from pydantic import ValidationError  # pylint: disable = no-name-in-module

from checksum import OutputChecksumError, verify_outputs
from config import SEED_ENV_VAR, ConfigError, RunConfig, parse_config
from experiment import ExperimentRunner, RunOutcome

logger = logging.getLogger(__name__)

LOG_LEVEL_CHOICES = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class ExitCode(IntEnum):
    """Process exit status."""

    SUCCESS = 0
    CONFIG_ERROR = 1
    PARTIAL_FAILURE = 2
    IO_ERROR = 3


def parse_seeds(text: str) -> t.Tuple[int, ...]:
    """Parse a comma separated list of unsigned seeds."""
    try:
        seeds = tuple(int(item) for item in text.split(",") if item.strip())
    except ValueError as err:
        raise ConfigError(f"invalid seed list {text!r}") from err
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def apply_overrides(
    cfg: RunConfig,
    out: t.Optional[Path] = None,
    seeds: t.Optional[str] = None,
    environ: t.Optional[t.Mapping[str, str]] = None,
) -> RunConfig:
    """Apply --out, --seeds and the seed environment variable; --seeds wins."""
    environ = os.environ if environ is None else environ
    data = cfg.dict()
    if seeds is not None:
        data["seeds"] = parse_seeds(seeds)
    elif environ.get(SEED_ENV_VAR):
        data["seeds"] = parse_seeds(environ[SEED_ENV_VAR])
        if len(data["seeds"]) != 1:
            raise ConfigError(f"{SEED_ENV_VAR} must hold a single seed")
    if out is not None:
        data["output"]["directory"] = Path(out)
    try:
        return RunConfig.parse_obj(data)
    except ValidationError as err:
        raise ConfigError(f"invalid override: {err}") from err


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the run, weights, curve and verify subcommands."""
    parser = argparse.ArgumentParser(
        prog="shiftcal",
        description="Conformal prediction under covariate shift with kernel mean matching.",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        type=str.upper,
        choices=LOG_LEVEL_CHOICES,
        help="logging level (case-insensitive)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every (method, mode, seed) and write reports, aggregate and summary",
        "weights": "write the calibration weights of every (method, seed)",
        "curve": "write the plot-ready coverage curve CSV",
    }
    for name, text in helps.items():
        sub = subparsers.add_parser(name, help=text)
        sub.add_argument("config", nargs="?", type=Path, help="config file")
        sub.add_argument("--config", dest="config_flag", type=Path, help="config file")
        sub.add_argument("--out", type=Path, help="output directory")
        sub.add_argument("--seeds", help="comma separated seeds overriding the config")
        sub.add_argument("--jobs", type=int, default=1, help="parallel (method, seed) groups")
    verify = subparsers.add_parser("verify", help="check output files against the manifest")
    verify.add_argument("directory", type=Path, help="output directory")
    return parser


def _status(outcome: RunOutcome) -> ExitCode:
    if outcome.io_failed:
        return ExitCode.IO_ERROR
    if outcome.failures:
        return ExitCode.PARTIAL_FAILURE
    return ExitCode.SUCCESS


def _verify(directory: Path) -> ExitCode:
    try:
        mismatched = verify_outputs(directory)
    except OutputChecksumError as err:
        logger.error(err)
        return ExitCode.IO_ERROR
    for path in mismatched:
        logger.error("Checksum mismatch: %s", path)
    return ExitCode.IO_ERROR if mismatched else ExitCode.SUCCESS


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    """Run the command line and return its exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    if args.command == "verify":
        return int(_verify(args.directory))

    config_path = args.config_flag or args.config
    try:
        if config_path is None:
            raise ConfigError("a config file is required")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = apply_overrides(parse_config(config_path), args.out, args.seeds)
        runner = ExperimentRunner(cfg, jobs=args.jobs)
        outcome = getattr(runner, args.command)()
    except ConfigError as err:
        logger.error(err)
        return int(ExitCode.CONFIG_ERROR)

    status = _status(outcome)
    logger.info("%s finished with exit status %d.", args.command, status)
    return int(status)


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
