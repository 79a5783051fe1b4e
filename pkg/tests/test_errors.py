import logging
import re
import warnings

import pytest

from pano_ba.errors import (
    PACKAGE_LOGGERS,
    ConfigError,
    DataError,
    LinearSolverError,
    MapFormatError,
    log_and_reraise,
    setup_logging,
)


@pytest.fixture
def restore_loggers():
    saved = {n: (logging.getLogger(n).handlers[:], logging.getLogger(n).level, logging.getLogger(n).propagate)
             for n in PACKAGE_LOGGERS}
    yield
    logging.captureWarnings(False)
    for name, (handlers, level, propagate) in saved.items():
        lg = logging.getLogger(name)
        for h in lg.handlers:
            h.close()
        lg.handlers[:] = handlers
        lg.setLevel(level)
        lg.propagate = propagate


def test_setup_logging_writes_package_records_once(tmp_path, restore_loggers):
    logfile = tmp_path / "run.log"
    setup_logging(logging.INFO, logfile=str(logfile))
    setup_logging(logging.INFO, logfile=str(logfile))
    logging.getLogger("pano_ba.lm").info("LM start: PhE=%.3g", 1.5)
    logging.getLogger("pano_ba.lm").debug("hidden")
    logging.getLogger("pano_scenes.scenes").warning("flat scene")
    text = logfile.read_text(encoding="utf-8")
    assert re.search(r"^\d\d:\d\d:\d\d\.\d{3} \[INFO\] pano_ba\.lm: LM start: PhE=1\.5$", text, re.M)
    assert text.count("LM start") == 1
    assert "hidden" not in text
    assert "[WARNING] pano_scenes.scenes: flat scene" in text


def test_runtime_warnings_reach_the_log(tmp_path, restore_loggers):
    logfile = tmp_path / "run.log"
    setup_logging(logging.DEBUG, logfile=str(logfile))
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.warn("overflow encountered in exp", RuntimeWarning)
    assert "py.warnings" in logfile.read_text(encoding="utf-8")


def test_exit_codes_follow_the_error_family():
    assert ConfigError.exit_code == 2
    assert issubclass(MapFormatError, DataError) and MapFormatError.exit_code == 3
    assert LinearSolverError.exit_code == 4


def test_log_and_reraise_wraps_foreign_errors():
    @log_and_reraise(MapFormatError)
    def broken():
        raise OSError("disk gone")

    @log_and_reraise(MapFormatError)
    def own():
        raise ConfigError("bad value")

    with pytest.raises(MapFormatError, match="broken failed: disk gone"):
        broken()
    with pytest.raises(ConfigError):
        own()
