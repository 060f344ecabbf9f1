"""Command line entry point with the five pipeline subcommands."""

import argparse
import json
import sys
from dataclasses import replace
from typing import List, Optional

import jsonschema

from .config import load_run_config
from .pipeline import (DataError, NoValidTrialsError, cmd_dataset_build,
                       cmd_gridsearch, cmd_report, cmd_separate, cmd_train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NO_VALID_TRIALS = 3

_COMMANDS = {
    "dataset-build": (cmd_dataset_build,
                      "render the recording corpus from the configuration"),
    "separate": (cmd_separate,
                 "factorize recordings and extract per-note features"),
    "train": (cmd_train, "train the configured (architecture, strategy) trials"),
    "gridsearch": (cmd_gridsearch, "train across the full architecture grid"),
    "report": (cmd_report, "build the analysis bundle from results.csv"),
}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="keyvel",
        description="MIDI velocity estimation from synthesized piano "
                    "recordings: dataset rendering, score-informed "
                    "separation, architecture gridsearch, and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="path to a JSON run configuration")
        p.add_argument("--output",
                       help="override the configured output directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Returns 0 on success, 1 on usage errors, 2 on data errors, 3 when
    no trial is valid."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_run_config(args.config)
        if args.output:
            cfg = replace(cfg, output_dir=args.output)
        _COMMANDS[args.command][0](cfg)
    except NoValidTrialsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_VALID_TRIALS
    except (DataError, OSError, json.JSONDecodeError,
            jsonschema.ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
