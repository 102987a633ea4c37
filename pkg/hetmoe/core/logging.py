"""
Logging configuration for hetmoe.
"""
import logging
import logging.config
import sys
from typing import Any, Dict

from hetmoe.core.config import settings


def setup_logging(level: str | None = None) -> None:
    """Set up logging configuration."""
    if level is None:
        level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL.upper()

    logging_config: Dict[str, Any] = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "default": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                "datefmt": "%Y-%m-%d %H:%M:%S",
            },
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "default",
                "stream": sys.stderr,
            },
        },
        "loggers": {
            "": {
                "handlers": ["console"],
                "level": level,
                "propagate": True,
            },
            "hetmoe": {
                "handlers": [],
                "level": level,
                "propagate": True,
            },
        },
    }

    logging.config.dictConfig(logging_config)


# Get logger instance
logger = logging.getLogger(__name__)
