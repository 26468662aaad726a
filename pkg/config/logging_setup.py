import sys
from typing import Optional

from loguru import logger


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Route loguru to stderr (stdout stays clean for --json output)."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format="<level>{level: <8}</level> | {name}:{function} - {message}")
    if log_file:
        logger.add(log_file, rotation="1 day", retention="7 days", level="DEBUG")
