from __future__ import annotations

import json
import logging

import numpy as np

from logging_utils import JsonFormatter, log_elapsed


def _record(**extra) -> logging.LogRecord:
    record = logging.LogRecord("microgrid", logging.INFO, __file__, 1, "scenario_started", (), None)
    record.__dict__.update(extra)
    return record


def test_formatter_merges_extra_and_converts_numerics() -> None:
    line = JsonFormatter().format(
        _record(dt=np.float64(1e-4), poles=np.array([-1.0, -2.0]), phasor=3 + 4j, peak=float("inf"))
    )
    payload = json.loads(line)
    assert payload["message"] == "scenario_started"
    assert payload["logger"] == "microgrid"
    assert payload["dt"] == 1e-4
    assert payload["poles"] == [-1.0, -2.0]
    assert payload["phasor"] == [3.0, 4.0]
    assert payload["peak"] == "inf"
    assert "msg" not in payload and "lineno" not in payload


def test_log_elapsed_reports_context_and_details(caplog) -> None:
    logger = logging.getLogger("microgrid.test")
    with caplog.at_level(logging.INFO, logger="microgrid.test"):
        with log_elapsed(logger, "sweep_timed", jobs=2) as details:
            details["traces"] = 4
    record = next(r for r in caplog.records if r.getMessage() == "sweep_timed")
    assert record.jobs == 2
    assert record.traces == 4
    assert record.elapsed_s >= 0.0
