import logging

import pytest

from rffi.logger import ScenarioIdFilter, get_scenario_id, log_scenario, set_scenario_id, setup_logger


def test_scenario_id_is_set_and_restored(caplog):
    logger = logging.getLogger("rffi")
    caplog.set_level(logging.INFO, logger="rffi")
    assert get_scenario_id() is None
    with log_scenario(logger, "outer"):
        with log_scenario(logger, "outer/inner") as log:
            assert get_scenario_id() == "outer/inner"
            log.summary = "auc=0.5000"
        assert get_scenario_id() == "outer"
    assert get_scenario_id() is None

    inner = [r.getMessage() for r in caplog.records if "auc=0.5000" in r.getMessage()]
    assert len(inner) == 1
    assert inner[0].startswith("done in ")


def test_failure_is_logged_and_reraised(caplog):
    logger = logging.getLogger("rffi")
    caplog.set_level(logging.INFO, logger="rffi")
    with pytest.raises(ValueError):
        with log_scenario(logger, "broken"):
            raise ValueError("boom")
    assert any("failed (ValueError: boom)" in r.getMessage() for r in caplog.records)
    assert get_scenario_id() is None


def test_filter_fills_placeholder():
    record = logging.LogRecord("rffi", logging.INFO, __file__, 1, "x", None, None)
    ScenarioIdFilter().filter(record)
    assert record.scenario_id == "-"
    set_scenario_id("s1")
    try:
        ScenarioIdFilter().filter(record)
        assert record.scenario_id == "s1"
    finally:
        set_scenario_id(None)


def test_setup_logger_replaces_handlers():
    logger = setup_logger("warning")
    setup_logger("debug")
    assert len(logger.handlers) == 1
    assert logger.level == logging.DEBUG
    setup_logger("warning")
