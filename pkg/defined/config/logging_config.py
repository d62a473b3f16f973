import functools
import logging
import logging.handlers
import os
import sys
import threading
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import structlog


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = "defined.log"):
    """
    Set up console and file logging with structlog on top of stdlib logging.

    Console output goes to stderr so that CSV and describe output written to
    stdout stays machine readable.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_file: Path to rotating log file, or None for console only
    """

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        log_file_path = Path(log_file)
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                log_file_path,
                maxBytes=10 * 1024 * 1024,  # 10MB
                backupCount=0,
            )
        )

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )

    def add_exception_trace(logger, method_name, event_dict):
        """Attach the active traceback to error level events"""
        if method_name == "error" and sys.exc_info()[0] is not None:
            event_dict["exception_traceback"] = traceback.format_exc()
        return event_dict

    def add_context_info(logger, method_name, event_dict):
        event_dict["process_id"] = os.getpid()
        event_dict["thread_id"] = threading.current_thread().ident
        return event_dict

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            add_context_info,
            add_exception_trace,
            structlog.processors.KeyValueRenderer(
                key_order=["timestamp", "level", "event"]
            ),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def log_call(func_name: Optional[str] = None) -> Callable:
    """
    Decorator that logs entry and exit of a long-running operation

    Args:
        func_name: Name used in the log events, defaults to the function name
    """
    logger = structlog.get_logger()

    def decorator(func):
        name = func_name or func.__name__

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            logger.debug(
                "function_entry",
                function=name,
                args_count=len(args),
                kwargs_keys=list(kwargs.keys()),
            )
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(
                    "function_exit_error",
                    function=name,
                    error=str(e),
                    error_type=type(e).__name__,
                )
                raise
            logger.debug(
                "function_exit_success",
                function=name,
                result_type=type(result).__name__ if result is not None else "None",
            )
            return result

        return wrapper

    return decorator


def describe_array(value: Any, name: str = "array") -> Dict[str, Any]:
    """Compact logging context for an array-like value"""
    shape = getattr(value, "shape", None)
    return {
        f"{name}_type": type(value).__name__,
        f"{name}_shape": tuple(shape) if shape is not None else None,
        f"{name}_dtype": str(getattr(value, "dtype", "")) or None,
    }
