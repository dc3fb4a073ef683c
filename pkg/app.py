import argparse
import logging
import sys
from typing import List, Optional

import commands.ablate as ablate
import commands.figures as figures
import commands.grad_check as grad_check
import commands.guide as guide
import commands.loss_eval as loss_eval
import commands.partition as partition
import commands.replay as replay
import commands.score as score
from utils.errors import ToloError
from utils.logging_setup import configure_logging

logger = logging.getLogger("tolo")

EXIT_IO = 1
EXIT_USAGE = 64

COMMANDS = (partition, guide, grad_check, loss_eval, score, replay, figures, ablate)


class ToloArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 64 instead of argparse's 2, which is taken by format errors"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = ToloArgumentParser(
        prog="tolo",
        description="Two-stage layout guidance: guided denoising, layout partitioning and layout metrics",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ToloArgumentParser)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else None)
    try:
        return args.handler(args)
    except ToloError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
