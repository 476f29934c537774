"""Command-line entry point: one subcommand per pipeline prefix plus selftest.

Exit codes: 0 success, 1 invariant or solver failure, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

from backend.harness.ExperimentConfig import OUTPUT_DIR_ENV, ExperimentConfig
from backend.harness.selftest import CORRUPTIONS, selftest
from backend.harness.WorkflowManager import COMMAND_STAGES, exit_code, run_pipeline
from backend.torus_core import ConfigurationError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _flag(name: str) -> str:
    return "--" + (name if name in ("N", "T") else name.replace("_", "-"))


def _config_flags() -> argparse.ArgumentParser:
    """Parent parser with one flag per ExperimentConfig field."""
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("experiment")
    group.add_argument("--config", help="key=value config file")
    for name, field in ExperimentConfig.model_fields.items():
        group.add_argument(_flag(name), dest=name, default=None,
                           help=None if field.default_factory else f"default: {field.default}")
    return parent


def _logging_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parent.add_argument("--diagnostics", metavar="PATH", help="write solver iterations as JSON lines")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="folklab",
        description="Ergodic mean field game laboratory on the circle.",
        epilog=f"The default output directory is read from ${OUTPUT_DIR_ENV}.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    config_flags, logging_flags = _config_flags(), _logging_flags()
    for command in COMMAND_STAGES:
        p = sub.add_parser(command, parents=[config_flags, logging_flags],
                           help=f"run stages {', '.join(COMMAND_STAGES[command])}")
        if command == "penalized":
            p.add_argument("--n", dest="n_penalization", help="penalization strength (alias)")
    st = sub.add_parser("selftest", parents=[logging_flags], help="fast invariant checks")
    st.add_argument("--corrupt", choices=CORRUPTIONS, help="deliberately break a solver setting")
    return parser


def configure_logging(level: str, diagnostics: Optional[str] = None) -> None:
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    if diagnostics:
        handler = logging.FileHandler(diagnostics, mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        diag = logging.getLogger("backend.diagnostics")
        diag.setLevel(logging.DEBUG)
        diag.propagate = False
        diag.addHandler(handler)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data: Dict = {}
    if args.config:
        data.update(ExperimentConfig.from_file(args.config).model_dump())
    for name in ExperimentConfig.model_fields:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return ExperimentConfig.load(data)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.diagnostics)

    if args.command == "selftest":
        report = selftest(corrupt=args.corrupt)
        sys.stdout.write(report.summary())
        return EXIT_OK if report.passed else EXIT_FAILURE

    try:
        config = load_config(args)
    except (ConfigurationError, OSError) as exc:
        logger.error(f"invalid configuration: {exc}")
        return EXIT_CONFIG

    state = run_pipeline(config, args.command)
    payload = {"status": state.get("status"), "output_dir": config.output_dir,
               "stages": state.get("stages_done", []), "error": state.get("error")}
    sys.stdout.write(json.dumps(payload, indent=2, default=str) + "\n")
    return exit_code(state)


if __name__ == "__main__":
    sys.exit(main())
