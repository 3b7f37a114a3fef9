import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from control import ProposedConfig  # noqa: E402
from plant import PlantParams  # noqa: E402


@pytest.fixture()
def params() -> PlantParams:
    return PlantParams()


@pytest.fixture()
def cfg() -> ProposedConfig:
    return ProposedConfig.from_ratios(20.0 * 3.141592653589793)


@pytest.fixture()
def write_scenario(tmp_path: Path):
    """Write a scenario document to ``tmp_path`` and return its path."""

    def _write(document: dict, name: str = "custom.json") -> Path:
        target = tmp_path / name
        target.write_text(json.dumps(document))
        return target

    return _write


@pytest.fixture()
def stiff_grid_document() -> dict:
    return {
        "name": "short_stiff",
        "topology": "stiff_grid",
        "duration": 0.2,
        "dt": 1e-4,
        "record_every": 10,
        "units": [{"name": "gfl", "kind": "gfl_proposed", "P_0": 10000.0, "Q_0": 0.0}],
    }
