import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .commands import depth, evaluate, render, run, synth
from .constants import ExitCode
from .errors import TrackingDiverged, UdgsError, UsageError
from .settings import get_log_level

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog="udgs",
        description="Monocular Gaussian-splatting SLAM with filtered metric depth.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliParser)
    subparsers.required = True

    run.register(subparsers)       # run
    depth.register(subparsers)     # filter-depth
    evaluate.register(subparsers)  # eval-ate, eval-render
    render.register(subparsers)    # render
    synth.register(subparsers)     # synth
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=get_log_level(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.handler(args) or ExitCode.OK)
    except TrackingDiverged as exc:
        logger.error(f"{exc}. Partial outputs were written.")
        return int(exc.exit_code)
    except UsageError as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        logger.error(str(exc))
        return int(exc.exit_code)
    except UdgsError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return int(exc.exit_code)


if __name__ == "__main__":
    sys.exit(main())
