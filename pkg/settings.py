"""Process settings and dotted-key overrides for scenario and analysis documents."""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Any, Dict, List, Sequence

from pydantic_settings import BaseSettings, SettingsConfigDict

from logging_utils import get_logger

logger = get_logger(__name__)

_DEFAULT_SCENARIO_DIR = Path(__file__).with_name("scenario_configs")
_PI_PATTERN = re.compile(r"^\s*([-+]?\d*\.?\d*(?:[eE][-+]?\d+)?)\s*\*?\s*pi\s*$")


class ConfigError(ValueError):
    """Raised for malformed configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, *, key: str | None = None, line: int | None = None) -> None:
        self.key = key
        self.line = line
        location = []
        if key is not None:
            location.append(f"key '{key}'")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")


class MicrogridSettings(BaseSettings):
    """Environment-driven defaults (``MICROGRID_*``)."""

    model_config = SettingsConfigDict(env_prefix="MICROGRID_", extra="ignore")

    output_dir: Path = Path("results")
    log_level: str = "INFO"
    scenario_dir: Path = _DEFAULT_SCENARIO_DIR
    jobs: int = 1
    max_override_length: int = 256
    service_name: str = "Microgrid Inverter Analysis"
    service_instructions: str = (
        "Closed-loop power analysis, transition certificates and bundled scenarios "
        "for grid-following and grid-forming inverters"
    )


def get_settings() -> MicrogridSettings:
    return MicrogridSettings()


def parse_angular(text: str) -> float:
    """Parse ``"62.83"``, ``"20pi"``, ``"20*pi"`` or ``"pi"`` to a float."""

    match = _PI_PATTERN.match(text)
    if match:
        factor = match.group(1)
        if factor in ("", "+"):
            return math.pi
        if factor == "-":
            return -math.pi
        return float(factor) * math.pi
    return float(text)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    try:
        return parse_angular(raw)
    except ValueError:
        return raw


def parse_override(text: str, *, max_length: int = 256) -> tuple[List[str], Any]:
    """Split ``section.key=value`` into its key path and parsed value."""

    if len(text) > max_length:
        raise ConfigError("override is too long", key=text[:40])
    if any(ord(ch) < 32 for ch in text):
        raise ConfigError("override contains control characters", key=text[:40])
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError("override must look like section.key=value", key=text)
    path = [part for part in key.split(".")]
    if any(not part for part in path):
        raise ConfigError("override key has an empty segment", key=key)
    return path, _parse_value(raw.strip())


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply dotted overrides in place; numeric segments index into lists."""

    settings = get_settings()
    for text in overrides:
        path, value = parse_override(text, max_length=settings.max_override_length)
        target: Any = document
        for depth, part in enumerate(path[:-1]):
            target = _descend(target, part, ".".join(path[: depth + 1]))
        _assign(target, path[-1], value, ".".join(path))
        logger.info("override_applied", extra={"key": ".".join(path), "value": value})
    return document


def _descend(target: Any, part: str, key: str) -> Any:
    if isinstance(target, list):
        index = _list_index(target, part, key)
        return target[index]
    if not isinstance(target, dict):
        raise ConfigError("cannot descend into a scalar", key=key)
    return target.setdefault(part, {})


def _assign(target: Any, part: str, value: Any, key: str) -> None:
    if isinstance(target, list):
        target[_list_index(target, part, key)] = value
    elif isinstance(target, dict):
        target[part] = value
    else:
        raise ConfigError("cannot assign into a scalar", key=key)


def _list_index(target: list, part: str, key: str) -> int:
    if not part.isdigit() or int(part) >= len(target):
        raise ConfigError("list index out of range", key=key)
    return int(part)
