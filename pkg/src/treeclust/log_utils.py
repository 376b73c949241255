import logging
import os

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    """Named logger with a single stream handler, level from TREECLUST_LOG_LEVEL."""
    logger = logging.getLogger(name)
    if not logger.handlers:
        _handler = logging.StreamHandler()
        _handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(_handler)
    level = os.getenv("TREECLUST_LOG_LEVEL", "INFO").upper()
    try:
        logger.setLevel(getattr(logging, level, logging.INFO))
    except Exception:  # pragma: no cover
        logger.setLevel(logging.INFO)
    return logger
