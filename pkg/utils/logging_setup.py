# ---------------------- utils/logging_setup.py ----------------------
import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def configure_logging(verbosity: int = 0, stream=None) -> logging.Logger:
    """
    Install one stderr handler on the root logger.

    Parameters:
    - verbosity (int): 0 warnings, 1 info, 2+ debug
    - stream: target stream, stderr by default

    Returns:
    - logging.Logger: the root logger
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_cvselect", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._cvselect = True
    root.addHandler(handler)
    root.setLevel(_LEVELS.get(verbosity, logging.DEBUG))
    return root
