"""Command-line interface.

Exit codes: 0 success, 1 task-level or data-level failures were present,
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import PIPELINES, ConfigError, load_config
from .datamodel import DatasetError
from .runner import cmd_export_tuning, cmd_report, cmd_run, cmd_validate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recollab",
        description=(
            "Referring-expression evaluation harness: route tasks between a "
            "specialist grounder and an MLLM, or let the MLLM pick among "
            "specialist candidates, then score the predictions."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", required=True, help="path to the YAML run config")

    sub.add_parser(
        "validate", parents=[common], help="load configured datasets and check their counts"
    )

    p_run = sub.add_parser(
        "run", parents=[common], help="evaluate the configured pipeline on the test split"
    )
    p_run.add_argument("--pipeline", choices=PIPELINES, help="override the configured pipeline")
    p_run.add_argument("--seed", type=int, help="override the configured seed")
    p_run.add_argument("--output-dir", help="override the configured output directory")

    sub.add_parser(
        "export-tuning",
        parents=[common],
        help="export multiple-choice tuning samples from the train split",
    )

    p_report = sub.add_parser(
        "report", parents=[common], help="re-render the report from an existing prediction log"
    )
    p_report.add_argument("--log", help="prediction log path (default: <output_dir>/predictions.jsonl)")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            if args.pipeline:
                cfg = replace(cfg, pipeline=args.pipeline)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            if args.output_dir:
                cfg = replace(cfg, output_dir=args.output_dir)
            return cmd_run(cfg)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "export-tuning":
            return cmd_export_tuning(cfg)
        if args.command == "report":
            return cmd_report(cfg, Path(args.log) if args.log else None)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
