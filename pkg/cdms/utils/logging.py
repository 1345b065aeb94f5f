import logging
import os
import socket
import sys
from pathlib import Path
from typing import Optional, Union

import coloredlogs

from cdms.utils.env import LOG_LEVEL

LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}

# Third-party loggers that are chatty at DEBUG
QUIET_LOGGERS = ("simpy", "lark")

FMT = "%(name)s: %(message)s"
FILE_FMT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def getLogger(name: str) -> logging.Logger:
    """Package-level logger: ``cdms.engine`` and ``cdms.simnet`` both log as ``cdms``."""
    return logging.getLogger(name.split(".")[0])


logger = getLogger(__name__)


def style_logging():
    assert LOG_LEVEL in LOG_LEVELS, f"Specified LOG_LEVEL should be one of {LOG_LEVELS}"

    # Installing coloredlogs during tests hides records from caplog
    if "pytest" not in sys.modules:
        coloredlogs.install(
            level=LOG_LEVEL,
            stream=sys.stderr,
            fmt=FMT,
            field_styles={"name": {"color": "cyan", "bold": True}},
            level_styles={
                "debug": {"color": "white", "faint": True},
                "warning": {"bold": True},
                "error": {"color": "red", "bold": True},
            },
        )

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.INFO if LOG_LEVEL == "DEBUG" else getattr(logging, LOG_LEVEL))


def init_logging(logdir: Optional[Union[str, Path]] = None):
    """Mirror the run's log records to ``<logdir>/run.log``."""
    if not logdir:
        return

    os.makedirs(logdir, exist_ok=True)
    handler = logging.FileHandler(Path(logdir) / "run.log")
    handler.setFormatter(logging.Formatter(FILE_FMT))
    logging.getLogger().addHandler(handler)

    logger.info(f"Running on host {socket.gethostname()}")
    logger.info(f"Run data is saved locally at {logdir}")
