from __future__ import annotations

import math
from pathlib import Path

import pytest

from settings import ConfigError, apply_overrides, get_settings, parse_angular, parse_override


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("62.5", 62.5),
        ("20pi", 20.0 * math.pi),
        ("20*pi", 20.0 * math.pi),
        ("pi", math.pi),
        ("-pi", -math.pi),
        ("0.5 pi", 0.5 * math.pi),
    ],
)
def test_parse_angular(text: str, expected: float) -> None:
    assert parse_angular(text) == pytest.approx(expected)


def test_parse_angular_rejects_words() -> None:
    with pytest.raises(ValueError):
        parse_angular("fast")


def test_parse_override_values() -> None:
    assert parse_override("control.omega_lpf=4pi") == (["control", "omega_lpf"], pytest.approx(4.0 * math.pi))
    assert parse_override("units.1.kind=gfm") == (["units", "1", "kind"], "gfm")
    assert parse_override("loads=[]") == (["loads"], [])


@pytest.mark.parametrize("text", ["no_equals", "=5", "a..b=1", "a=\x01", "k=" + "9" * 300])
def test_parse_override_rejects_malformed(text: str) -> None:
    with pytest.raises(ConfigError):
        parse_override(text)


def test_apply_overrides_creates_sections_and_indexes_lists() -> None:
    document = {"units": [{"name": "a"}, {"name": "b"}]}
    apply_overrides(document, ["units.1.P_0=5000", "control.pll.k_p=1"])
    assert document["units"][1]["P_0"] == 5000
    assert document["control"] == {"pll": {"k_p": 1}}


def test_apply_overrides_reports_bad_index() -> None:
    with pytest.raises(ConfigError) as info:
        apply_overrides({"units": [{}]}, ["units.3.P_0=1"])
    assert info.value.key == "units.3"
    assert "list index out of range" in str(info.value)


def test_apply_overrides_cannot_descend_into_scalar() -> None:
    with pytest.raises(ConfigError, match="scalar"):
        apply_overrides({"dt": 1e-4}, ["dt.value=1"])


def test_settings_read_environment(monkeypatch, tmp_path: Path) -> None:
    monkeypatch.setenv("MICROGRID_OUTPUT_DIR", str(tmp_path))
    monkeypatch.setenv("MICROGRID_JOBS", "4")
    settings = get_settings()
    assert settings.output_dir == tmp_path
    assert settings.jobs == 4
    assert settings.scenario_dir.name == "scenario_configs"


def test_config_error_message_carries_location() -> None:
    error = ConfigError("bad value", key="control.k_pP", line=7)
    assert str(error) == "bad value (key 'control.k_pP', line 7)"
