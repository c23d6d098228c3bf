import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

import orjson

from pocketdiff.core.config import Config


LOG_DIR = Path(Config.LOG_DIR)
LOG_FILE = LOG_DIR / "pocketdiff.log"
LOG_LEVEL = Config.LOG_LEVEL.upper()
MAX_LOG_SIZE = 10 * 1024 * 1024
BACKUP_COUNT = 5


class JSONLogFormatter(logging.Formatter):
    def format(self, record):
        log_record = {
            "timestamp": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        context = getattr(record, "context", None)
        if context:
            log_record["context"] = context
        if record.exc_info:
            log_record["exception"] = self.formatException(record.exc_info)
        return orjson.dumps(log_record, option=orjson.OPT_SERIALIZE_NUMPY).decode()


standard_formatter = logging.Formatter(
    fmt="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S"
)

console_handler = logging.StreamHandler()
console_handler.setFormatter(standard_formatter)
console_handler.setLevel(LOG_LEVEL)

_file_handler: Optional[RotatingFileHandler] = None


def _get_file_handler() -> Optional[RotatingFileHandler]:
    global _file_handler
    if _file_handler is None:
        try:
            LOG_DIR.mkdir(parents=True, exist_ok=True)
            handler = RotatingFileHandler(
                LOG_FILE, maxBytes=MAX_LOG_SIZE, backupCount=BACKUP_COUNT, encoding="utf-8"
            )
        except OSError:
            # read-only working directories still get console logs
            return None
        handler.setFormatter(JSONLogFormatter() if Config.LOG_JSON else standard_formatter)
        handler.setLevel(LOG_LEVEL)
        _file_handler = handler
    return _file_handler


def get_logger(name: str) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(LOG_LEVEL)
    if not logger.handlers:
        file_handler = _get_file_handler()
        if file_handler is not None:
            logger.addHandler(file_handler)
        logger.addHandler(console_handler)
        logger.propagate = False
    return logger
