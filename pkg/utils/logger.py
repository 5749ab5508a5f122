"""
Logger Configuration
--------------------
Sets up logging for the DC-SMC engine using loguru.
Engine internals log per-node summaries at DEBUG; run lifecycle events and
worker traffic log at INFO. Logs are written to the console and, unless
DCSMC_LOG_DIR is empty, to a rotating log file.
"""

import sys
from loguru import logger
from pathlib import Path

from config.settings import LOG_DIR, LOG_LEVEL

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}"


def setup_logger(log_dir=LOG_DIR, level=LOG_LEVEL):
    """
    Configure the engine logger with console and file destinations.
    The file sink captures DEBUG and above and rotates at 10MB; it is skipped
    when log_dir is empty so test runs and workers can stay console-only.
    """

    # Remove default logger to avoid duplicate logs
    logger.remove()

    logger.add(sys.stdout, format=LOG_FORMAT, level=level)

    if log_dir:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_path / "dcsmc_{time}.log",
            format=LOG_FORMAT,
            level="DEBUG",
            rotation="10 MB",
            retention="7 days",
            compression="zip",
        )

    logger.debug("DC-SMC logger initialized")
    return logger


# Initialize logger on module import
dcsmc_logger = setup_logger()
