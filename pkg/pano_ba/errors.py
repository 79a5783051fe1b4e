from __future__ import annotations
import logging
import functools
from typing import Any, Callable, Dict, Optional, Type


class PanoBAError(Exception):
    exit_code = 1


# ---------------- config (exit 2) ----------------
class ConfigError(PanoBAError):
    exit_code = 2

class CalibrationError(ConfigError): pass
class AliasingError(ConfigError): pass


# ---------------- data (exit 3) ----------------
class DataError(PanoBAError):
    exit_code = 3

class EventParseError(DataError): pass
class EventIngestError(DataError): pass
class TrajectoryError(DataError): pass
class QueryError(DataError): pass
class MapFormatError(DataError): pass
class DegenerateBearingError(DataError): pass
class PoleSingularityError(DataError): pass
class InvalidSampleError(DataError): pass
class StateError(DataError): pass


# ---------------- solver (exit 4) ----------------
class SolverError(PanoBAError):
    exit_code = 4

class LinearSolverError(SolverError): pass
class DensifyError(SolverError): pass


class NonFiniteLossError(SolverError):
    def __init__(self, message: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.dump = dump or {}


LOG_FORMAT = "%(asctime)s.%(msecs)03d [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%H:%M:%S"
PACKAGE_LOGGERS = ("pano_ba", "pano_scenes", "py.warnings")


def setup_logging(level: int = logging.INFO, logfile: str | None = None) -> list[logging.Logger]:
    """
    Attach one stream handler (and a file handler with `logfile`) to the
    project loggers. Numpy/SciPy RuntimeWarnings (overflow in a loss,
    ill-conditioned factorizations) are routed through `py.warnings`.
    Calling it again replaces the handlers.
    """
    logging.captureWarnings(True)
    fmt = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if logfile:
        handlers.append(logging.FileHandler(logfile, encoding="utf-8"))
    for h in handlers:
        h.setFormatter(fmt)
    loggers = []
    for name in PACKAGE_LOGGERS:
        lg = logging.getLogger(name)
        for h in list(lg.handlers):  # avoid duplicate handlers
            lg.removeHandler(h)
            h.close()
        lg.setLevel(level)
        lg.propagate = False
        for h in handlers:
            lg.addHandler(h)
        loggers.append(lg)
    return loggers


def log_and_reraise(exception_cls: Type[PanoBAError] = DataError):
    """
    Wrap I/O helpers: own errors pass through untouched, anything else
    (OSError, UnicodeDecodeError, ...) is logged once and re-raised as
    `exception_cls`.
    """
    def deco(func: Callable[..., Any]):
        @functools.wraps(func)
        def wrapper(*a, **kw):
            try:
                return func(*a, **kw)
            except PanoBAError:
                raise
            except Exception as e:
                logging.getLogger(func.__module__).error("%s failed: %s", func.__name__, e)
                raise exception_cls(f"{func.__name__} failed: {e}") from e
        return wrapper
    return deco
