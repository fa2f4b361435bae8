# DEPENDENCIES

import sys
import copy
import logging
from pathlib import Path
from colorama import Fore
from colorama import Style
from datetime import datetime

from config.config import LOG_DIR
from config.config import LOG_LEVEL
from config.config import LOG_TO_FILE


LOG_FORMAT = "[%(asctime)s %(filename)s->%(funcName)s()] | [line no.:%(lineno)d] %(levelname)s: %(message)s"


def resolve_level(name : str) -> int:
    """ Numeric logging level for a level name; unknown names fall back to INFO. """
    level = logging.getLevelName(str(name).upper())

    return level if isinstance(level, int) else logging.INFO


class LoggerSetup:
    """
    Per-module logger with a colored console handler and an optional plain-text file copy.

    Handlers are attached once per logger name, so importing a module many times (pytest collects
    every test file) does not duplicate output.
    """

    def __init__(self, logger_name : str = "microdiff", log_filename_prefix : str = "log", log_dir : str | Path | None = None,
                 to_file : bool | None = None) -> None:
        """
        Arguments:

            - `logger_name`          {str}       : Logger name, one per source file (e.g. "solver.py").

            - `log_filename_prefix`  {str}       : Stem of the timestamped log file.

            - `log_dir`              {Path}      : Overrides MICRODIFF_LOG_DIR.

            - `to_file`              {bool}      : Overrides MICRODIFF_LOG_TO_FILE.
        """
        self.logger   = logging.getLogger(logger_name)
        self.log_file = None

        self.logger.setLevel(resolve_level(LOG_LEVEL))

        if self.logger.handlers:
            self.log_file = next((Path(h.baseFilename) for h in self.logger.handlers if isinstance(h, logging.FileHandler)), None)
            return

        self.logger.addHandler(self._console_handler())

        if LOG_TO_FILE if to_file is None else to_file:
            self.log_file = self._log_path(Path(log_dir if log_dir is not None else LOG_DIR), log_filename_prefix)
            self.logger.addHandler(self._file_handler(self.log_file))

        self.logger.propagate = False

    @staticmethod
    def _log_path(directory : Path, prefix : str) -> Path:
        directory.mkdir(parents = True, exist_ok = True)

        return directory / f"{prefix}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"

    @staticmethod
    def _console_handler() -> logging.Handler:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(StyledFormatter(LOG_FORMAT))

        return handler

    @staticmethod
    def _file_handler(path : Path) -> logging.Handler:
        handler = logging.FileHandler(path, encoding = "utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

        return handler

    def get_logger(self) -> logging.Logger:
        return self.logger


class StyledFormatter(logging.Formatter):
    """
    Colors the level name of console records; the message text stays uncolored so numbers in
    progress lines remain easy to copy.
    """

    COLOR_MAP = {"DEBUG"    : Fore.CYAN,
                 "INFO"     : Fore.GREEN,
                 "WARNING"  : Fore.YELLOW,
                 "ERROR"    : Fore.RED + Style.BRIGHT,
                 "CRITICAL" : Fore.MAGENTA + Style.BRIGHT,
                 }

    def format(self, record : logging.LogRecord) -> str:
        styled           = copy.copy(record)
        color            = self.COLOR_MAP.get(record.levelname, Fore.WHITE)
        styled.levelname = f"{color}{record.levelname}{Style.RESET_ALL}"

        return super().format(styled)
