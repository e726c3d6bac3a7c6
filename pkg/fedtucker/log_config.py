"""
Logging setup shared by the CLI and scripts
"""

import logging
from pathlib import Path

import colorlog

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level='INFO', log_dir='logs', log_file='fedtucker.log'):
    """
    Configure the root logger with a colored console handler and a file handler

    Args:
        level: Logging level name or number
        log_dir: Directory for the log file (None disables file logging)
        log_file: Log file name inside log_dir

    Returns:
        The configured root logger
    """
    root = logging.getLogger()
    root.setLevel(level)

    # Re-running setup (tests, repeated CLI calls) must not stack handlers
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    stream_handler = colorlog.StreamHandler()
    stream_handler.setFormatter(colorlog.ColoredFormatter(
        '%(log_color)s' + LOG_FORMAT,
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        }
    ))
    root.addHandler(stream_handler)

    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(log_dir) / log_file)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)

    return root
