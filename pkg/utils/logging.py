import logging
import os
import sys
from datetime import datetime
from typing import Optional

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'
LOGGER_NAME = 'cmc_restore'

logger = logging.getLogger(LOGGER_NAME)

if not logger.handlers:
    _stream_handler = logging.StreamHandler(sys.stdout)
    _stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(_stream_handler)
    logger.setLevel(logging.INFO)


def configure_logging(log_dir: Optional[str] = None, level: int = logging.INFO) -> Optional[str]:
    """
    Set the package log level and, when a directory is given, attach a dated file handler.

    Returns:
        Path of the log file, or None when only stdout is used.
    """
    logger.setLevel(level)
    if log_dir is None:
        return None
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, f'run_{datetime.now().strftime("%Y%m%d")}.log')
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == os.path.abspath(log_file):
            return log_file
    file_handler = logging.FileHandler(log_file)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)
    return log_file


def log_exception(exc, extra_info=None):
    import traceback
    logger.error('Exception occurred: %s', exc)
    logger.error('Traceback:\n%s', traceback.format_exc())
    if extra_info:
        logger.error('Context: %s', extra_info)
