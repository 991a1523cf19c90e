import logging
from pathlib import Path
from typing import Optional

from src.config import LOG_LEVEL, COLOR_LOGS

FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%H:%M:%S'


# ANSI escape sequences for colors
class ColoredFormatter(logging.Formatter):
    # Define colors
    COLOR_CODES = {
        logging.INFO: "\033[92m",  # Green
        logging.WARNING: "\033[93m",  # Yellow
        logging.ERROR: "\033[91m",  # Red
        logging.CRITICAL: "\033[91m",
        'RESET': "\033[0m"  # Reset to default
    }

    def format(self, record):
        color = self.COLOR_CODES.get(record.levelno, self.COLOR_CODES['RESET'])
        reset = self.COLOR_CODES['RESET']
        message = super().format(record)
        return f"{color}{message}{reset}"


def setup_logging(level: Optional[str] = None, color: Optional[bool] = None):
    color = COLOR_LOGS if color is None else color
    formatter = ColoredFormatter(FORMAT, datefmt=DATE_FORMAT) if color else logging.Formatter(FORMAT,
                                                                                              datefmt=DATE_FORMAT)

    handler = logging.StreamHandler()
    handler.setFormatter(formatter)

    logging.basicConfig(
        level=getattr(logging, level or LOG_LEVEL, logging.INFO),
        handlers=[handler],
        force=True
    )


def attach_run_log(path: Path) -> logging.Handler:
    """Mirror log records into a plain-text file inside the run directory"""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding='utf-8')
    handler.setFormatter(logging.Formatter(FORMAT, datefmt=DATE_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler):
    logging.getLogger().removeHandler(handler)
    handler.close()
