import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from src.commands import COMMANDS, cmd_verify
from src.config import load_run_config
from src.constants import EXIT_MISSING_ARTIFACT, EXIT_OK, EXIT_PROPERTY_FAILURE, EXIT_USAGE
from src.errors import MissingArtifactError, PropertyFailure, StbError
from src.logging import setup_logging

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='stb-asv',
                            description="Frame-level multi-channel speaker verification on simulated ad-hoc arrays.")
    parser.add_argument('command', choices=list(COMMANDS), help="Workflow step to run.")
    parser.add_argument('--config', type=Path, help="JSON experiment config (sections sim, model, train, eval).")
    parser.add_argument('--seed', type=int, help="Root seed; overrides the config file and STB_ASV_SEED.")
    parser.add_argument('--out', type=Path, help="Run directory; defaults to STB_ASV_OUT.")
    parser.add_argument('--force', action='store_true', help="Overwrite existing outputs of this command.")
    parser.add_argument('--points', type=int, default=100, help="Random points per gradient suite (verify only).")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)

    try:
        run = load_run_config(args.command, args.config, args.seed, args.out, args.force)
        if args.command == 'verify':
            cmd_verify(run, args.points)
        else:
            COMMANDS[args.command](run)
        return EXIT_OK
    except MissingArtifactError as e:
        logger.error(str(e))
        return EXIT_MISSING_ARTIFACT
    except PropertyFailure as e:
        logger.error(str(e))
        return EXIT_PROPERTY_FAILURE
    except (StbError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("Process interrupted by user. Shutting down.")
        return EXIT_USAGE
    except Exception as e:
        logger.critical(f"Critical error occurred: {str(e)}")
        logger.critical(traceback.format_exc())
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
