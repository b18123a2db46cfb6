import functools
from typing import Any, Dict, Optional

from src.utils.logger import LoggerFactory


class WfRenormError(Exception):
    """Base class of every error raised by the toolkit."""


class ParameterError(WfRenormError, ValueError):
    pass


class DomainError(WfRenormError, ValueError):
    pass


class ConvergenceError(WfRenormError):
    pass


class NumericalGuardError(WfRenormError):
    """A run tripped a numerical guard; carries a diagnostics dict for the manifest."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DivergenceError(NumericalGuardError):
    pass


class CeilingExceededError(NumericalGuardError):
    pass


class ErrorHandler:
    @staticmethod
    def handle_errors(logger_name):
        def decorator(func):
            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                logger = LoggerFactory.get_logger(logger_name)
                try:
                    return func(*args, **kwargs)
                except Exception as e:
                    logger.error(f"Error in {func.__name__}: {str(e)}")
                    raise
            return wrapper
        return decorator

    @staticmethod
    def require(condition: bool, message: str, error=ParameterError) -> None:
        if not condition:
            raise error(message)
