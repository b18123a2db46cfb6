import logging
from typing import Dict, Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class LoggerFactory:
    _level: int = logging.INFO
    _loggers: Dict[str, logging.Logger] = {}

    @staticmethod
    def get_logger(name: str) -> logging.Logger:
        logger = logging.getLogger(f"wfrenorm.{name}")
        if not logger.handlers:
            logger.setLevel(LoggerFactory._level)
            formatter = logging.Formatter(LOG_FORMAT)
            ch = logging.StreamHandler()
            ch.setFormatter(formatter)
            logger.addHandler(ch)
            logger.propagate = False
        LoggerFactory._loggers[name] = logger
        return logger

    @staticmethod
    def set_level(level: Optional[str | int]) -> None:
        """Apply a level to every logger handed out so far and to future ones."""
        if level is None:
            return
        if isinstance(level, str):
            resolved = logging.getLevelName(level.upper())
            if not isinstance(resolved, int):
                raise ValueError(f"Unknown log level: {level}")
            level = resolved
        LoggerFactory._level = level
        for logger in LoggerFactory._loggers.values():
            logger.setLevel(level)
