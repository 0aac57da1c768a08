"""Centralized logging infrastructure for vsmlab.

Provides consistent logging across all modules with proper formatting
and level management.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_DATEFMT = '%Y-%m-%d %H:%M:%S'


def get_logger(name: str, level: Optional[int] = None) -> logging.Logger:
    """Get a logger for the specified module.

    Args:
        name: Logger name, typically __name__ from calling module
        level: Optional logging level (defaults to INFO)

    Returns:
        Configured logger instance

    Example:
        >>> from vsmlab.logging import get_logger
        >>> logger = get_logger(__name__)
        >>> logger.info("Run finished")
    """
    logger = logging.getLogger(f"vsmlab.{name}")

    # Only configure if this logger hasn't been configured yet
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
        logger.addHandler(handler)
        logger.setLevel(level or logging.INFO)
        # Root "vsmlab" logger gets its own handler in configure_root_logger
        logger.propagate = False

    return logger


def get_file_logger(
    name: str,
    log_file: Path,
    level: Optional[int] = None
) -> logging.Logger:
    """Get a logger that writes to a run's log file.

    Args:
        name: Logger name
        log_file: Path to log file (usually <out>/run.log)
        level: Optional logging level (defaults to DEBUG)

    Returns:
        Configured logger instance with file handler
    """
    logger = logging.getLogger(f"vsmlab.{name}.file")

    # A new run directory replaces the previous file handler
    for old in list(logger.handlers):
        logger.removeHandler(old)
        old.close()

    log_file.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_file)
    handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
    logger.addHandler(handler)
    logger.setLevel(level or logging.DEBUG)

    return logger


def configure_root_logger(level: int = logging.INFO) -> None:
    """Configure the root vsmlab logger and every module logger under it.

    Args:
        level: Logging level for root logger
    """
    root_logger = logging.getLogger("vsmlab")
    root_logger.setLevel(level)

    if not root_logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
        root_logger.addHandler(handler)

    for logger_name, logger in logging.root.manager.loggerDict.items():
        if logger_name.startswith("vsmlab.") and isinstance(logger, logging.Logger):
            if not logger_name.endswith(".file"):
                logger.setLevel(level)
