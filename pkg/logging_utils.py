"""Structured JSON logging shared by the simulator, the CLI and the service.

One JSON object per line on stderr. The message is an event name; context
travels in ``extra=`` and is merged into the object. Values from the numerics
(numpy scalars and arrays, complex phasors, non-finite floats from a diverging
run) are converted so every line stays valid JSON.
"""
from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator

import numpy as np

_RESERVED = frozenset(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}

_CONFIGURED = False


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else str(value)
    if isinstance(value, complex):
        return [_plain(value.real), _plain(value.imag)]
    if isinstance(value, np.ndarray):
        return [_plain(item) for item in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


class JsonFormatter(logging.Formatter):
    default_time_format = "%Y-%m-%dT%H:%M:%S"
    default_msec_format = "%s.%03dZ"

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = _plain(value)
        return json.dumps(payload, default=str)


def configure_logging(level: str | None = None, *, force: bool = False) -> None:
    """Install the JSON handler on the root logger.

    ``force`` re-applies the level, which the CLI uses for ``--log-level``.
    """

    global _CONFIGURED
    if _CONFIGURED and not force:
        return

    resolved_level = level or os.getenv("MICROGRID_LOG_LEVEL", "INFO")
    logging.captureWarnings(True)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())

    root = logging.getLogger()
    root.setLevel(resolved_level.upper())
    root.handlers = [handler]

    _CONFIGURED = True


def get_logger(name: str) -> logging.Logger:
    configure_logging()
    return logging.getLogger(name)


@contextmanager
def log_elapsed(logger: logging.Logger, event: str, **context: Any) -> Iterator[Dict[str, Any]]:
    """Log ``event`` with wall-clock ``elapsed_s`` once the block finishes.

    The yielded dict may be filled inside the block; its entries are logged too.
    Nothing is logged when the block raises.
    """

    details: Dict[str, Any] = {}
    started = time.perf_counter()
    yield details
    logger.info(event, extra={**context, **details, "elapsed_s": round(time.perf_counter() - started, 6)})
