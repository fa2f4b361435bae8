import logging

import pytest

from logger.logger import LoggerSetup
from logger.logger import resolve_level
from logger.logger import StyledFormatter


def _record(level, message = "step 3 done"):
    return logging.LogRecord("solver.py", level, __file__, 10, message, None, None, func = "solve_step")


@pytest.mark.parametrize("name, level", [("debug", logging.DEBUG), ("WARNING", logging.WARNING), ("loud", logging.INFO)])
def test_resolve_level(name, level):
    assert resolve_level(name) == level


def test_console_formatter_colors_level_only():
    text = StyledFormatter("%(levelname)s: %(message)s").format(_record(logging.WARNING))

    assert text.endswith(": step 3 done")
    assert StyledFormatter.COLOR_MAP["WARNING"] in text


def test_formatter_leaves_record_untouched():
    record = _record(logging.ERROR)
    StyledFormatter("%(levelname)s").format(record)

    assert record.levelname == "ERROR"


def test_file_copy_is_plain_text(tmp_path):
    setup  = LoggerSetup(logger_name = "test_logger_file", log_filename_prefix = "unit", log_dir = tmp_path, to_file = True)
    logger = setup.get_logger()
    logger.setLevel(logging.INFO)
    logger.info("energy = 0.25")

    for handler in logger.handlers:
        handler.flush()

    assert setup.log_file.parent == tmp_path
    assert setup.log_file.name.startswith("unit_")
    assert "INFO: energy = 0.25" in setup.log_file.read_text()


def test_handlers_attach_once(tmp_path):
    first  = LoggerSetup(logger_name = "test_logger_once", log_dir = tmp_path, to_file = True)
    second = LoggerSetup(logger_name = "test_logger_once", log_dir = tmp_path, to_file = True)

    assert len(second.get_logger().handlers) == 2
    assert second.log_file == first.log_file


def test_console_only_without_file():
    setup = LoggerSetup(logger_name = "test_logger_console", to_file = False)

    assert setup.log_file is None
    assert len(setup.get_logger().handlers) == 1
