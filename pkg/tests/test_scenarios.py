from __future__ import annotations

import asyncio
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy import signal

from plant import NetworkConfigError
from scenarios import (
    OMEGA_LPF_SWEEP,
    MicrogridSimulator,
    RocofWindowError,
    ScenarioConfigError,
    ScenarioFailedError,
    SettlingError,
    SweepCoordinator,
    Trace,
    bundled_scenarios,
    build_scenario,
    compute_overshoot,
    compute_rocof,
    load_scenario,
    run_fast_load_step,
    run_power_tracking,
    run_slow_load_ramp,
    run_transition,
    scenario_metrics,
    settling_time,
    simulate,
    tracking_errors,
)


@pytest.fixture()
def islanded_document() -> dict:
    return {
        "name": "short_island",
        "topology": "microgrid",
        "duration": 0.3,
        "dt": 1e-4,
        "record_every": 10,
        "units": [
            {"name": "gfm", "kind": "gfm", "P_0": 10000.0, "Q_0": 10000.0},
            {"name": "gfl", "kind": "gfl_proposed", "P_0": 10000.0, "Q_0": 0.0},
        ],
        "loads": [{"P_load": 20000.0, "Q_load": 10000.0}],
    }


def _synthetic_trace(times: np.ndarray, omega: np.ndarray) -> Trace:
    return Trace(sample_period=float(times[1] - times[0]), columns={"t": times, "gfm.omega": omega})


def test_bundled_scenarios_validate() -> None:
    names = bundled_scenarios()
    assert names == ["fast_load_step", "power_tracking", "slow_load_ramp", "transition"]
    for name in names:
        scenario = load_scenario(name)
        assert scenario.name == name
        assert scenario.unit_under_test.kind == "gfl_proposed"


def test_overrides_apply_before_validation() -> None:
    scenario = load_scenario("power_tracking", ["control.omega_lpf=4pi", "units.0.P_0=9000"])
    assert scenario.control.omega_lpf == pytest.approx(4.0 * math.pi)
    assert scenario.units[0].P_0 == 9000.0
    with pytest.raises(ScenarioConfigError, match="exceeds omega_lpf"):
        load_scenario("power_tracking", ["control.k_iQ_ratio=2.0"])


def test_missing_scenario_file(tmp_path: Path) -> None:
    with pytest.raises(ScenarioConfigError, match="not found"):
        load_scenario(tmp_path / "absent.json")
    with pytest.raises(ScenarioConfigError):
        load_scenario("no_such_bundled_scenario")


def test_invalid_json_reports_line(tmp_path: Path) -> None:
    target = tmp_path / "broken.json"
    target.write_text('{\n  "name": "x",\n  "duration": ,\n}\n')
    with pytest.raises(ScenarioConfigError) as info:
        load_scenario(target)
    assert info.value.line == 3


@pytest.mark.parametrize(
    ("mutation", "message"),
    [
        (lambda doc: doc["units"].append(dict(doc["units"][0])), "unique"),
        (
            lambda doc: doc.update(
                events=[
                    {"time": 0.1, "kind": "setpoint", "unit": "gfl", "P_0": 1.0},
                    {"time": 0.05, "kind": "setpoint", "unit": "gfl", "P_0": 2.0},
                ]
            ),
            "ordered",
        ),
        (
            lambda doc: doc.update(events=[{"time": 0.1, "kind": "setpoint", "unit": "other", "P_0": 1.0}]),
            "unknown unit",
        ),
        (lambda doc: doc.update(events=[{"time": 0.1, "kind": "load"}]), "need a load"),
        (lambda doc: doc.update(duration=5.0, events=[{"time": 6.0, "kind": "load", "load": {"P_load": 1.0}}]), "duration"),
    ],
)
def test_scenario_consistency_checks(stiff_grid_document: dict, mutation, message: str) -> None:
    mutation(stiff_grid_document)
    with pytest.raises(ScenarioConfigError, match=message):
        build_scenario(stiff_grid_document)


def test_validation_error_names_key(stiff_grid_document: dict) -> None:
    stiff_grid_document["units"][0]["kind"] = "vsg"
    with pytest.raises(ScenarioConfigError) as info:
        build_scenario(stiff_grid_document)
    assert info.value.key == "units.0.kind"


def test_islanded_scenario_needs_forming_unit(islanded_document: dict) -> None:
    islanded_document["units"] = islanded_document["units"][1:]
    with pytest.raises(NetworkConfigError):
        MicrogridSimulator(build_scenario(islanded_document))


def test_stiff_grid_equilibrium_holds(stiff_grid_document: dict) -> None:
    trace = simulate(build_scenario(stiff_grid_document))
    assert len(trace) == 201
    assert trace.t[-1] == pytest.approx(0.2)
    assert np.max(np.abs(trace["gfl.P"] - 10000.0)) < 50.0
    assert np.max(np.abs(trace["gfl.Q"])) < 50.0
    assert np.all(trace["gfl.saturated"] == 0.0)
    assert np.all(trace["gfl.eps_P"] == 0.0)


def test_stiff_grid_equilibrium_holds_for_one_second(stiff_grid_document: dict) -> None:
    stiff_grid_document.update(duration=1.0, record_every=50)
    trace = simulate(build_scenario(stiff_grid_document))
    assert trace.valid
    assert np.max(np.abs(trace["gfl.P"] - 10000.0)) < 50.0
    assert np.max(np.abs(trace["gfl.Q"])) < 50.0
    assert np.max(np.abs(trace["gfl.V"] - 391.0)) < 5.0


def test_islanded_equilibrium_holds_for_one_second(islanded_document: dict) -> None:
    islanded_document.update(duration=1.0, record_every=50)
    trace = simulate(build_scenario(islanded_document))
    assert trace.valid
    assert np.max(np.abs(trace["bus.V"] - 391.0)) < 0.05 * 391.0
    _, tail = trace.window("gfm.P", 0.8)
    assert np.ptp(tail) < 100.0
    supplied = trace.mean_before("gfm.P", 1.0, span=0.2) + trace.mean_before("gfl.P", 1.0, span=0.2)
    consumed = trace.mean_before("load.P", 1.0, span=0.2) + trace.mean_before("line_loss.P", 1.0, span=0.2)
    assert supplied == pytest.approx(consumed, rel=0.02)


def test_simulation_is_deterministic(islanded_document: dict) -> None:
    scenario = build_scenario(islanded_document)
    first, second = simulate(scenario), simulate(scenario)
    assert list(first.columns) == list(second.columns)
    for name in first.columns:
        assert np.array_equal(first[name], second[name]), name


def test_saturated_run_is_flagged(stiff_grid_document: dict) -> None:
    stiff_grid_document["plant"] = {"V_dc": 600.0}
    scenario = build_scenario(stiff_grid_document)
    trace = simulate(scenario)
    assert trace.saturated_steps > 0
    assert not trace.valid
    metrics = scenario_metrics(trace, scenario)
    assert metrics.as_dict()["scenario_valid"] is False


def test_setpoint_event_is_recorded(stiff_grid_document: dict) -> None:
    stiff_grid_document["events"] = [{"time": 0.1, "kind": "setpoint", "unit": "gfl", "P_0": 11000.0}]
    trace = simulate(build_scenario(stiff_grid_document))
    times, P_0 = trace.window("gfl.P_0")
    assert np.all(P_0[times < 0.1 - 1e-9] == 10000.0)
    assert np.all(P_0[times >= 0.1] == 11000.0)
    assert trace["gfl.P"][-1] > 10000.0


def test_islanded_power_balance(islanded_document: dict) -> None:
    trace = simulate(build_scenario(islanded_document))
    supplied = trace.mean_before("gfm.P", 0.3) + trace.mean_before("gfl.P", 0.3)
    consumed = trace.mean_before("load.P", 0.3) + trace.mean_before("line_loss.P", 0.3)
    assert supplied == pytest.approx(consumed, rel=0.02)
    assert trace.mean_before("bus.V", 0.3) == pytest.approx(391.0, rel=0.05)


def test_diverging_step_reports_signal(stiff_grid_document: dict) -> None:
    stiff_grid_document["dt"] = 2e-3
    stiff_grid_document["record_every"] = 1
    stiff_grid_document["events"] = [{"time": 0.02, "kind": "setpoint", "unit": "gfl", "P_0": 12000.0}]
    with pytest.raises(ScenarioFailedError) as info:
        simulate(build_scenario(stiff_grid_document))
    assert info.value.signal.split(".")[0] in ("gfl", "state")
    assert 0.0 < info.value.time <= 0.2


def test_trace_csv_round_trip(tmp_path: Path, stiff_grid_document: dict) -> None:
    trace = simulate(build_scenario(stiff_grid_document))
    target = tmp_path / "trace.csv"
    trace.write_csv(target)
    frame = pd.read_csv(target)
    assert list(frame.columns)[:4] == ["t", "gfl.P", "gfl.Q", "gfl.V"]
    assert list(frame.columns)[-4:] == ["bus.V", "load.P", "load.Q", "line_loss.P"]
    assert len(frame) == len(trace)
    with pytest.raises(KeyError, match="no channel"):
        trace["gfl.missing"]


def test_tracking_errors_checkpoints(stiff_grid_document: dict) -> None:
    scenario = build_scenario(stiff_grid_document)
    rows = tracking_errors(simulate(scenario), scenario)
    assert [row["time"] for row in rows] == [0.2]
    assert rows[0]["error_P"] < 0.005


def test_overshoot_on_new_level() -> None:
    times = np.linspace(0.0, 2.0, 2001)
    values = np.where(times < 1.0, 0.0, 1.0)
    values = values + np.where((times > 1.05) & (times < 1.1), 0.2, 0.0)
    assert compute_overshoot(times, values, 1.0) == pytest.approx(0.2)


def test_overshoot_on_return_excludes_ripple_band() -> None:
    times = np.linspace(0.0, 2.0, 2001)
    values = 0.01 * np.sin(2.0 * math.pi * 50.0 * times)
    values = values + np.where((times > 1.0) & (times < 1.2), 0.5, 0.0)
    values[times > 1.6] = 0.0
    overshoot = compute_overshoot(times, values, 1.0, settle_floor=0.02)
    assert overshoot == pytest.approx(0.5, abs=0.02)


def test_overshoot_requires_settled_tail() -> None:
    times = np.linspace(0.0, 2.0, 2001)
    with pytest.raises(SettlingError):
        compute_overshoot(times, times.copy(), 1.0)


def test_settling_time_of_first_order_response() -> None:
    times = np.linspace(0.0, 10.0, 100001)
    values = 1.0 - np.exp(-times)
    assert settling_time(times, values, 0.0) == pytest.approx(math.log(50.0), abs=5e-3)


def test_rocof_of_frequency_ramp() -> None:
    times = np.arange(0.0, 1.0, 1e-3)
    rate = 0.5  # Hz/s
    omega = 2.0 * math.pi * (60.0 - rate * times)
    assert compute_rocof(_synthetic_trace(times, omega), "gfm") == pytest.approx(rate, rel=1e-3)


def test_rocof_needs_filter_warm_up() -> None:
    times = np.arange(0.0, 0.05, 1e-3)
    with pytest.raises(RocofWindowError):
        compute_rocof(_synthetic_trace(times, np.full_like(times, 377.0)), "gfm")


def test_overshoot_of_underdamped_second_order() -> None:
    omega_n, zeta = 10.0, 0.5
    times = np.linspace(0.0, 10.0, 20001)
    _, values = signal.step(([omega_n ** 2], [1.0, 2.0 * zeta * omega_n, omega_n ** 2]), T=times)
    expected = math.exp(-math.pi * zeta / math.sqrt(1.0 - zeta ** 2))
    assert expected == pytest.approx(0.163, abs=1e-3)
    assert compute_overshoot(times, values, 0.0) == pytest.approx(expected, abs=1e-3)


def test_rocof_filter_matches_sample_recursion() -> None:
    times = np.arange(0.0, 1.0, 1e-3)
    omega = 2.0 * math.pi * (60.0 - 0.4 * np.clip(times - 0.5, 0.0, None) + 0.01 * np.sin(40.0 * times))
    tau = 1.0 / (2.0 * math.pi * 10.0)
    gain = -math.expm1(-1e-3 / tau)
    filtered = [omega[0] / (2.0 * math.pi)]
    for value in omega[1:] / (2.0 * math.pi):
        filtered.append(filtered[-1] + gain * (value - filtered[-1]))
    expected = float(np.max(np.abs(np.gradient(np.array(filtered), times))))
    assert compute_rocof(_synthetic_trace(times, omega), "gfm") == pytest.approx(expected, rel=1e-9)


class TrackingCoordinator(SweepCoordinator):
    def __init__(self, *, max_concurrency: int) -> None:
        super().__init__(max_concurrency=max_concurrency)
        self.max_observed = 0
        self._active = 0

    async def _simulate(self, scenario):
        self._active += 1
        self.max_observed = max(self.max_observed, self._active)
        try:
            await asyncio.sleep(0)
            return Trace(sample_period=1.0, columns={"t": np.zeros(1)}, name=scenario.name)
        finally:
            self._active -= 1


@pytest.mark.asyncio()
async def test_sweep_throttles_concurrency(stiff_grid_document: dict) -> None:
    scenarios = []
    for idx in range(7):
        stiff_grid_document["name"] = f"variant_{idx}"
        scenarios.append(build_scenario(stiff_grid_document))
    coordinator = TrackingCoordinator(max_concurrency=3)
    traces = await coordinator.run(scenarios)
    assert [trace.name for trace in traces] == [f"variant_{idx}" for idx in range(7)]
    assert coordinator.max_observed == 3


# ---------------------------------------------------------------------------
# full experiments (minutes each at dt = 1e-4)


@pytest.mark.slow
def test_power_tracking_experiment() -> None:
    results = run_power_tracking(dt=1e-4, jobs=2)
    assert set(results) == {"proposed_4pi", "proposed_10pi", "proposed_20pi", "conventional"}
    for label, (scenario, trace) in results.items():
        rows = tracking_errors(trace, scenario)
        if label == "conventional":
            # open-loop current command: error follows the capacitor voltage rise
            assert all(max(row["error_P"], row["error_Q"]) < 0.03 for row in rows)
            continue
        assert all(row["error_P"] < 0.01 for row in rows), label
        if label == "proposed_4pi":
            # reactive pole near 1.4 rad/s needs more than one interval
            assert next(row for row in rows if row["time"] == 10.0)["error_Q"] < 0.01
        else:
            assert all(row["error_Q"] < 0.01 for row in rows), label


@pytest.mark.slow
def test_fast_load_step_experiment() -> None:
    result = run_fast_load_step(dt=1e-4, jobs=2)
    assert set(result.rocof_ratio) == {"proposed_4pi", "proposed_10pi", "proposed_20pi"}
    assert len(OMEGA_LPF_SWEEP) == len(result.rocof_ratio)
    for label, ratio in result.rocof_ratio.items():
        assert 0.35 <= ratio <= 0.70, label
    rocof = {label: metrics.rocof_max for label, metrics in result.metrics.items()}
    assert rocof["proposed_4pi"] <= rocof["proposed_10pi"] <= rocof["proposed_20pi"] < rocof["conventional"]
    for label, trace in result.traces.items():
        assert trace.valid, label
        if label == "conventional":
            continue
        # the GFL returns to its setpoint once the GFM has picked up the load
        assert trace.mean_before("gfl.P", trace.t[-1], span=0.2) == pytest.approx(10000.0, rel=0.01), label


@pytest.mark.slow
def test_slow_load_ramp_experiment() -> None:
    result = run_slow_load_ramp(dt=1e-4)
    assert result.gfl_max_deviation < 0.03
    assert result.gfm_rise == pytest.approx(result.load_rise, rel=0.15)


@pytest.mark.slow
def test_transition_experiment() -> None:
    result = run_transition(dt=1e-4, jobs=2)
    assert result.overshoot_ratio_P <= 0.05
    assert result.overshoot_Q["smooth"] < 50.0
    for label in ("smooth", "sudden"):
        assert result.return_transient_P[label] < 0.1 * result.overshoot_P["sudden"], label
        trace = result.traces[label]
        assert trace.valid, label
        assert trace.mean_before("gfl.P", trace.t[-1], span=0.2) == pytest.approx(10000.0, rel=0.01), label
