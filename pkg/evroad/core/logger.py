import os
import logging
import datetime
from logging.handlers import TimedRotatingFileHandler
from evroad.core.config import get_config


class TapeTraceFilter(logging.Filter):
    """Filter to exclude per-sample backward traces from the tape"""
    def filter(self, record):
        if record.getMessage().startswith('backward'):
            return False
        return True


def setup_logging(level: str = None):
    """Set up logging based on configuration."""
    # Check if the root logger already has handlers configured
    if logging.getLogger().hasHandlers():
        if level:
            logging.getLogger().setLevel(getattr(logging, level.upper(), logging.INFO))
        return

    config = get_config()
    log_level = getattr(logging, (level or config.general.log_level).upper(), logging.INFO)

    log_dir = config.general.log_dir
    if not os.path.isabs(log_dir):
        log_dir = os.path.join(os.getcwd(), log_dir)
    os.makedirs(log_dir, exist_ok=True)

    # One file per day
    today = datetime.datetime.now().strftime('%Y-%m-%d')
    log_file = os.path.join(log_dir, f"{today}.log")

    handlers = [
        logging.StreamHandler(),
        TimedRotatingFileHandler(
            log_file,
            when='midnight',
            backupCount=7,
            encoding="utf-8"
        )
    ]

    trace_filter = TapeTraceFilter()
    for handler in handlers:
        handler.addFilter(trace_filter)

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def get_logger(name):
    """Get a logger with the specified name."""
    setup_logging()
    return logging.getLogger(name)
