# MAIN FUNCTION

# DEPENDENCIES

import sys
import warnings

from logger.logger import LoggerSetup
from src.cli.commands import build_parser
from src.utils.exceptions import MicrostructureError

warnings.filterwarnings(action = "ignore", category = UserWarning)

# LOGGER SETUP
main_logger = LoggerSetup(logger_name = "main.py", log_filename_prefix = "main").get_logger()


def main(argv : list | None = None) -> int:
    """
    Run one subcommand and translate package errors into exit codes: 0 success, 2 configuration,
    3 data or checkpoint, 4 numerical failure, 5 exhaustion.
    """
    parser = build_parser()
    args   = parser.parse_args(argv)

    try:
        args.handler(args)

    except MicrostructureError as e:
        main_logger.error(f"{args.command} failed: {repr(e)}")

        return e.exit_code

    main_logger.info(f"{args.command} completed successfully")

    return 0


if __name__ == "__main__":
    sys.exit(main())
