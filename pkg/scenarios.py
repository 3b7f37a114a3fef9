"""Scenario engine and experiment harness.

A :class:`Scenario` describes units, loads and timed events. The
:class:`MicrogridSimulator` samples every controller once per step (zero-order
hold), integrates the plant with RK4 and records a :class:`Trace`.
"""
from __future__ import annotations

import asyncio
import cmath
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import signal

from control import (
    ControlSection,
    ConventionalGflController,
    Controller,
    GfmDroopController,
    ProposedGflController,
    Setpoint,
    TransitionSchedule,
)
from logging_utils import get_logger, log_elapsed
from numerics import IntegrationDivergedError, rk4_step
from plant import (
    DqPair,
    GridState,
    InverterState,
    LoadSpec,
    Network,
    PlantParams,
    inverter_derivatives,
    network_step_context,
    power_from_dq,
)
from settings import ConfigError, apply_overrides, get_settings

logger = get_logger(__name__)

TWO_PI = 2.0 * math.pi
DIVERGENCE_LIMIT = 1e6
STATE_NAMES = ("i_L.d", "i_L.q", "V_c.d", "V_c.q", "i_g.d", "i_g.q", "theta")
OMEGA_LPF_SWEEP = (4.0 * math.pi, 10.0 * math.pi, 20.0 * math.pi)


class ScenarioConfigError(ConfigError):
    """Scenario document could not be read or validated."""


class ScenarioFailedError(ArithmeticError):
    """Simulation left the physical range; ``signal`` names the culprit."""

    def __init__(self, signal: str, time: float) -> None:
        self.signal = signal
        self.time = time
        super().__init__(f"scenario diverged in signal '{signal}' at t={time:.6f}s")


class SettlingError(ValueError):
    """A signal never reached a steady value inside the analysis window."""


class RocofWindowError(ValueError):
    """The frequency record is shorter than the RoCoF filter warm-up."""


# ---------------------------------------------------------------------------
# scenario documents


class UnitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1, max_length=32, pattern=r"^[A-Za-z][A-Za-z0-9_]*$")
    kind: Literal["gfm", "gfl_conventional", "gfl_proposed"]
    P_0: float = 0.0
    Q_0: float = 0.0


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    V_g: float | None = None
    frequency_offset: float = 0.0
    theta_g: float = 0.0


class EventSpec(BaseModel):
    """Timed change: unit setpoint, added load or an ε transition."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    time: float = Field(ge=0.0)
    kind: Literal["setpoint", "load", "transition"]
    unit: str | None = None
    P_0: float | None = None
    Q_0: float | None = None
    load: LoadSpec | None = None
    schedule: TransitionSchedule | None = None

    @model_validator(mode="after")
    def _check_payload(self) -> "EventSpec":
        if self.kind == "setpoint" and (self.unit is None or (self.P_0 is None and self.Q_0 is None)):
            raise ValueError("setpoint events need a unit and P_0 and/or Q_0")
        if self.kind == "load" and self.load is None:
            raise ValueError("load events need a load")
        if self.kind == "transition" and (self.unit is None or self.schedule is None):
            raise ValueError("transition events need a unit and a schedule")
        return self


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "scenario"
    topology: Literal["stiff_grid", "microgrid"]
    duration: float = Field(gt=0.0)
    dt: float = Field(5e-5, gt=0.0)
    record_every: int = Field(20, ge=1)
    plant: PlantParams = PlantParams()
    control: ControlSection = ControlSection()
    grid: GridSpec = GridSpec()
    units: List[UnitSpec] = Field(min_length=1)
    loads: List[LoadSpec] = []
    events: List[EventSpec] = []

    @model_validator(mode="after")
    def _check_consistency(self) -> "Scenario":
        names = [unit.name for unit in self.units]
        if len(set(names)) != len(names):
            raise ValueError("unit names must be unique")
        times = [event.time for event in self.events]
        if times != sorted(times):
            raise ValueError("events must be ordered in time")
        if times and times[-1] > self.duration:
            raise ValueError("events must fall inside the scenario duration")
        for event in self.events:
            if event.unit is not None and event.unit not in names:
                raise ValueError(f"event refers to unknown unit '{event.unit}'")
        if self.dt * self.record_every > self.duration:
            raise ValueError("sample period exceeds the scenario duration")
        return self

    @property
    def sample_period(self) -> float:
        return self.dt * self.record_every

    def unit(self, name: str) -> UnitSpec:
        for unit in self.units:
            if unit.name == name:
                return unit
        raise KeyError(name)

    @property
    def unit_under_test(self) -> UnitSpec:
        """First non-GFM unit, or the only unit."""

        for unit in self.units:
            if unit.kind != "gfm":
                return unit
        return self.units[0]

    @property
    def forming_unit(self) -> UnitSpec | None:
        return next((unit for unit in self.units if unit.kind == "gfm"), None)


def resolve_scenario_path(source: str | Path) -> Path:
    """Map a bundled scenario name or a file path to an existing file."""

    candidate = Path(source)
    if candidate.suffix == ".json" or candidate.exists():
        path = candidate
    else:
        path = get_settings().scenario_dir / f"{source}.json"
    if not path.is_file():
        logger.error("scenario_missing", extra={"path": str(path)})
        raise ScenarioConfigError(f"scenario file not found: {path}")
    return path


def bundled_scenarios() -> List[str]:
    return sorted(path.stem for path in get_settings().scenario_dir.glob("*.json"))


def load_scenario_document(source: str | Path) -> Dict[str, Any]:
    path = resolve_scenario_path(source)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        logger.error("scenario_invalid_json", extra={"path": str(path), "error": exc.msg})
        raise ScenarioConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(document, dict):
        raise ScenarioConfigError("scenario file must contain a JSON object")
    return document


def build_scenario(document: Mapping[str, Any]) -> Scenario:
    try:
        return Scenario.model_validate(document)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or None
        logger.warning("scenario_invalid", extra={"key": key, "detail": first["msg"]})
        raise ScenarioConfigError(first["msg"], key=key) from exc


def load_scenario(source: str | Path, overrides: Sequence[str] = ()) -> Scenario:
    """Read a bundled or user scenario and apply ``section.key=value`` overrides."""

    document = load_scenario_document(source)
    apply_overrides(document, overrides)
    scenario = build_scenario(document)
    logger.info(
        "scenario_loaded",
        extra={"scenario": scenario.name, "units": len(scenario.units), "events": len(scenario.events)},
    )
    return scenario


# ---------------------------------------------------------------------------
# traces and metrics


@dataclass
class Trace:
    """Uniformly sampled record; every column has the same length as ``t``."""

    sample_period: float
    columns: Dict[str, np.ndarray]
    name: str = "trace"
    saturated_steps: int = 0

    @property
    def valid(self) -> bool:
        """False once any unit hit the modulation limit; metrics then describe a clipped plant."""
        return self.saturated_steps == 0

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]

    def __getitem__(self, channel: str) -> np.ndarray:
        try:
            return self.columns[channel]
        except KeyError:
            raise KeyError(f"trace has no channel '{channel}'") from None

    def __len__(self) -> int:
        return len(self.t)

    def window(
        self, channel: str, start: float | None = None, end: float | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.t >= start - 1e-9
        if end is not None:
            mask &= self.t <= end + 1e-9
        return self.t[mask], self[channel][mask]

    def mean_before(self, channel: str, time: float, span: float = 0.1) -> float:
        _, values = self.window(channel, time - span, time - self.sample_period)
        return float(np.mean(values))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.columns)

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f")

    def rocof(self, unit: str, start: float | None = None, end: float | None = None) -> float:
        return compute_rocof(self, unit, start=start, end=end)

    def overshoot(self, channel: str, start: float, end: float | None = None, **kwargs: Any) -> float:
        times, values = self.window(channel, None, end)
        return compute_overshoot(times, values, start, **kwargs)


def compute_rocof(
    trace: Trace,
    unit: str,
    *,
    start: float | None = None,
    end: float | None = None,
    cutoff_hz: float = 10.0,
) -> float:
    """Peak ``|df/dt|`` [Hz/s] of the low-pass filtered frequency of ``unit``."""

    times, omega = trace.window(f"{unit}.omega", start, end)
    tau = 1.0 / (TWO_PI * cutoff_hz)
    if times.size < 3 or times[-1] - times[0] < 5.0 * tau:
        raise RocofWindowError(
            f"frequency record of {times[-1] - times[0] if times.size else 0.0:.4f}s "
            f"is shorter than the filter warm-up {5.0 * tau:.4f}s"
        )
    frequency = omega / TWO_PI
    gain = -math.expm1(-(times[1] - times[0]) / tau)
    # zero-order-hold first-order lag, started at rest on the first sample
    filtered, _ = signal.lfilter([gain], [1.0, gain - 1.0], frequency, zi=[(1.0 - gain) * frequency[0]])
    return float(np.max(np.abs(np.gradient(filtered, times))))


def compute_overshoot(
    times: np.ndarray,
    values: np.ndarray,
    start: float,
    *,
    settle_window: float = 0.2,
    pre_window: float = 0.1,
    settle_floor: float = 1e-6,
    settle_fraction: float = 0.05,
) -> float:
    """Peak excursion past the final value after ``start``.

    When the signal moves to a new level only the excursion beyond it counts;
    when it returns to where it was, the peak deviation above the pre-existing
    ripple band counts.
    """

    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    pre = values[(times >= start - pre_window) & (times < start)]
    post_mask = times >= start
    post_times, post = times[post_mask], values[post_mask]
    if post.size == 0:
        raise SettlingError("no samples after the event")
    initial = float(pre[-1]) if pre.size else float(post[0])
    band = float(np.max(np.abs(pre - pre.mean()))) if pre.size else 0.0

    tail = post[post_times >= post_times[-1] - settle_window]
    final = float(np.mean(tail))
    step = final - initial
    tolerance = max(settle_fraction * abs(step), settle_floor)
    if float(np.max(tail) - np.min(tail)) > tolerance:
        raise SettlingError(
            f"signal still moving: spread {np.max(tail) - np.min(tail):.6g} > {tolerance:.6g}"
        )
    if abs(step) > band + settle_floor:
        direction = math.copysign(1.0, step)
        return max(0.0, float(np.max(direction * (post - final))))
    return max(0.0, float(np.max(np.abs(post - final))) - band)


def settling_time(
    times: np.ndarray, values: np.ndarray, start: float, *, fraction: float = 0.02, floor: float = 1e-6
) -> float:
    """Time after ``start`` until the signal stays within ``fraction`` of its step."""

    mask = times >= start
    t_post, post = times[mask], values[mask]
    final = float(post[-1])
    band = max(fraction * abs(final - float(post[0])), floor)
    outside = np.nonzero(np.abs(post - final) > band)[0]
    if outside.size == 0:
        return 0.0
    return float(t_post[min(outside[-1] + 1, t_post.size - 1)] - start)


@dataclass(frozen=True)
class Metrics:
    rocof_max: float
    overshoot_P: float
    overshoot_Q: float
    steady_state_error_P: float
    steady_state_error_Q: float
    settling_time: float
    saturated_steps: int = 0

    @property
    def scenario_valid(self) -> bool:
        return self.saturated_steps == 0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "scenario_valid": self.scenario_valid,
            "saturated_steps": self.saturated_steps,
            "rocof_max": self.rocof_max,
            "overshoot_P": self.overshoot_P,
            "overshoot_Q": self.overshoot_Q,
            "steady_state_error_P": self.steady_state_error_P,
            "steady_state_error_Q": self.steady_state_error_Q,
            "settling_time": self.settling_time,
        }


def scenario_metrics(trace: Trace, scenario: Scenario, *, settle_floor: float = 50.0) -> Metrics:
    """Metrics of the unit under test around the first event."""

    unit = scenario.unit_under_test
    event_time = scenario.events[0].time if scenario.events else 0.0
    next_time = scenario.events[1].time if len(scenario.events) > 1 else scenario.duration
    frequency_unit = (scenario.forming_unit or unit).name

    def guarded(func, *args, **kwargs) -> float:
        try:
            return func(*args, **kwargs)
        except (SettlingError, RocofWindowError) as exc:
            logger.warning("metric_undefined", extra={"metric": func.__name__, "error": str(exc)})
            return math.nan

    rocof = guarded(compute_rocof, trace, frequency_unit, start=max(0.0, event_time - 0.1))
    overshoot_P = guarded(
        trace.overshoot, f"{unit.name}.P", event_time, next_time, settle_floor=settle_floor
    )
    overshoot_Q = guarded(
        trace.overshoot, f"{unit.name}.Q", event_time, next_time, settle_floor=settle_floor
    )
    end = trace.t[-1]
    P_end = trace.mean_before(f"{unit.name}.P", end + trace.sample_period, span=0.2)
    Q_end = trace.mean_before(f"{unit.name}.Q", end + trace.sample_period, span=0.2)
    P_0 = float(trace[f"{unit.name}.P_0"][-1])
    Q_0 = float(trace[f"{unit.name}.Q_0"][-1])
    scale = max(math.hypot(P_0, Q_0), 1.0)
    times, power = trace.window(f"{unit.name}.P", None, next_time)
    return Metrics(
        rocof_max=rocof,
        overshoot_P=overshoot_P,
        overshoot_Q=overshoot_Q,
        steady_state_error_P=abs(P_end - P_0) / max(abs(P_0), 1.0),
        steady_state_error_Q=abs(Q_end - Q_0) / scale,
        settling_time=settling_time(times, power, event_time, floor=settle_floor),
        saturated_steps=trace.saturated_steps,
    )


def tracking_errors(trace: Trace, scenario: Scenario, *, span: float = 0.1) -> List[Dict[str, float]]:
    """Relative P/Q error just before each event and at the end of the run."""

    unit = scenario.unit_under_test.name
    checkpoints = [event.time for event in scenario.events if event.time > 0.0] + [scenario.duration]
    rows = []
    for time in checkpoints:
        P = trace.mean_before(f"{unit}.P", time, span)
        Q = trace.mean_before(f"{unit}.Q", time, span)
        P_0 = trace.mean_before(f"{unit}.P_0", time, span)
        Q_0 = trace.mean_before(f"{unit}.Q_0", time, span)
        rows.append(
            {
                "time": time,
                "P": P,
                "Q": Q,
                "P_0": P_0,
                "Q_0": Q_0,
                "error_P": abs(P - P_0) / max(abs(P_0), 1.0),
                "error_Q": abs(Q - Q_0) / max(abs(Q_0), 1.0),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# simulation engine


@dataclass
class Unit:
    spec: UnitSpec
    controller: Controller


def _build_controller(unit: UnitSpec, scenario: Scenario) -> Controller:
    plant = scenario.plant
    setpoint = Setpoint(P_0=unit.P_0, Q_0=unit.Q_0, V_0=plant.V_0, omega_0=plant.omega_0)
    control = scenario.control
    if unit.kind == "gfm":
        return GfmDroopController(setpoint, plant, control.inner, control.droop)
    if unit.kind == "gfl_conventional":
        return ConventionalGflController(setpoint, plant, control.inner, control.pll)
    schedules = tuple(
        event.schedule.model_copy(update={"start_time": event.time})
        for event in scenario.events
        if event.kind == "transition" and event.unit == unit.name and event.schedule is not None
    )
    return ProposedGflController(setpoint, plant, control.inner, control.proposed(), schedules)


def _initial_state(current: complex, v_bus: complex, plant: PlantParams) -> InverterState:
    """Branch state whose capacitor voltage drives ``current`` into ``v_bus``."""

    v_c = v_bus + plant.line_impedance * current
    theta = cmath.phase(v_c)
    rotation = cmath.exp(-1j * theta)
    i_g = current * rotation
    V_c = abs(v_c)
    return InverterState(
        i_L=DqPair(i_g.real, i_g.imag + plant.omega_0 * plant.C_i * V_c),
        V_c=DqPair(V_c, 0.0),
        i_g=DqPair(i_g.real, i_g.imag),
        theta=theta,
    )


class MicrogridSimulator:
    """Single-rate simulation of one scenario."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.plant = scenario.plant
        self.units = [
            Unit(spec=unit, controller=_build_controller(unit, scenario))
            for unit in scenario.units
        ]
        loads = list(scenario.loads) + [
            event.load.model_copy(update={"start_time": event.time})
            for event in scenario.events
            if event.kind == "load" and event.load is not None
        ]
        grid = None
        if scenario.topology == "stiff_grid":
            grid = GridState(
                V_g=scenario.grid.V_g if scenario.grid.V_g is not None else self.plant.V_0,
                omega_g=self.plant.omega_0 + TWO_PI * scenario.grid.frequency_offset,
                theta_g=scenario.grid.theta_g,
            )
        self.network = Network(
            params=self.plant,
            loads=tuple(loads),
            grid_breaker="closed" if grid is not None else "open",
            forming=tuple(unit.controller.forming for unit in self.units),
            grid=grid,
        )
        self.x = self._initial_vector()
        self._initialise_controllers()

    def _initial_vector(self) -> np.ndarray:
        plant = self.plant
        if self.network.grid is not None:
            v_bus = self.network.grid.phasor_at(0.0, plant.omega_0)
        else:
            v_bus = complex(plant.V_0, 0.0)

        def setpoint_current(unit: UnitSpec) -> complex:
            return (complex(unit.P_0, unit.Q_0) / (1.5 * v_bus)).conjugate()

        currents = [setpoint_current(unit.spec) for unit in self.units]
        if self.network.grid is None:
            load_current = self.network.admittance(0.0) * v_bus
            forming = [k for k, unit in enumerate(self.units) if unit.controller.forming]
            others = sum(currents[k] for k in range(len(currents)) if k not in forming)
            for k in forming:
                currents[k] = (load_current - others) / len(forming)
        states = [_initial_state(current, v_bus, plant) for current in currents]
        return np.concatenate([state.to_array() for state in states])

    def _initialise_controllers(self) -> None:
        """Seed forming units first; followers start at the droop frequency they set."""

        omega = None
        forming = [(k, u) for k, u in enumerate(self.units) if isinstance(u.controller, GfmDroopController)]
        for k, unit in forming:
            unit.controller.initialise(self._unit_state(self.x, k))
        if self.network.grid is not None:
            omega = self.network.grid.omega_g
        elif forming:
            omega = float(np.mean([unit.controller.droop_frequency() for _, unit in forming]))
        for k, unit in enumerate(self.units):
            if not isinstance(unit.controller, GfmDroopController):
                unit.controller.initialise(self._unit_state(self.x, k), omega=omega)

    @staticmethod
    def _unit_state(x: np.ndarray, k: int) -> InverterState:
        size = InverterState.SIZE
        return InverterState.from_array(x[k * size : (k + 1) * size])

    def _derivative(self, outputs) -> Any:
        plant = self.plant
        network = self.network
        n = len(self.units)

        def derivative(t: float, x: np.ndarray) -> np.ndarray:
            states = [self._unit_state(x, k) for k in range(n)]
            solution = network_step_context(states, network, t)
            parts = [
                inverter_derivatives(states[k], outputs[k].m, plant, outputs[k].omega, solution.v_pcc[k])[0]
                for k in range(n)
            ]
            return np.concatenate(parts)

        return derivative

    def _check_finite(self, t: float) -> None:
        bad = np.nonzero(~np.isfinite(self.x) | (np.abs(self.x) > DIVERGENCE_LIMIT))[0]
        if bad.size:
            index = int(bad[0])
            unit = self.units[index // InverterState.SIZE].spec.name
            signal = f"{unit}.{STATE_NAMES[index % InverterState.SIZE]}"
            logger.error("scenario_diverged", extra={"signal": signal, "time": t})
            raise ScenarioFailedError(signal, t)

    def _apply_event(self, event: EventSpec) -> None:
        if event.kind != "setpoint":
            return
        for unit in self.units:
            if unit.spec.name == event.unit:
                unit.controller.setpoint = unit.controller.setpoint.with_changes(event.P_0, event.Q_0)
                logger.info(
                    "setpoint_changed",
                    extra={"unit": event.unit, "time": event.time, "P_0": event.P_0, "Q_0": event.Q_0},
                )

    def _columns(self) -> List[str]:
        names = ["t"]
        for unit in self.units:
            prefix = unit.spec.name
            names += [
                f"{prefix}.{suffix}"
                for suffix in ("P", "Q", "V", "omega", "delta", "P_0", "Q_0", "eps_P", "eps_Q", "saturated")
            ]
        names += ["bus.V", "load.P", "load.Q", "line_loss.P"]
        return names

    def _sample(self, t: float, outputs) -> List[float]:
        states = [self._unit_state(self.x, k) for k in range(len(self.units))]
        solution = network_step_context(states, self.network, t)
        grid_angle = (
            self.network.grid.angle_at(t, self.plant.omega_0) if self.network.grid is not None else 0.0
        )
        row = [t]
        loss = 0.0
        for unit, state, output in zip(self.units, states, outputs):
            P, Q = power_from_dq(state.V_c, state.i_g)
            setpoint = unit.controller.setpoint
            row += [
                P,
                Q,
                state.V_c.magnitude,
                output.omega,
                state.theta + cmath.phase(state.V_c.as_complex()) - grid_angle,
                setpoint.P_0,
                setpoint.Q_0,
                output.eps_P,
                output.eps_Q,
                float(output.saturated),
            ]
            loss += 1.5 * self.plant.R_g * (state.i_g.d ** 2 + state.i_g.q ** 2)
        load_power = 1.5 * solution.v_bus * solution.load_current.conjugate()
        row += [abs(solution.v_bus), load_power.real, load_power.imag, loss]
        return row

    def run(self) -> Trace:
        scenario = self.scenario
        dt = scenario.dt
        n_steps = int(round(scenario.duration / dt))
        pending = [event for event in scenario.events if event.kind == "setpoint"]
        rows: List[List[float]] = []
        logger.info(
            "scenario_started",
            extra={"scenario": scenario.name, "steps": n_steps, "dt": dt},
        )
        tau_c = scenario.control.inner.tau_c
        if dt > 0.5 * tau_c:
            logger.warning("step_coarse_for_current_loop", extra={"dt": dt, "tau_c": tau_c})
        saturated_steps = 0
        for step in range(n_steps + 1):
            t = step * dt
            while pending and pending[0].time <= t + 1e-12:
                self._apply_event(pending.pop(0))
            outputs = [
                unit.controller.control(self._unit_state(self.x, k), t, dt)
                for k, unit in enumerate(self.units)
            ]
            saturated_steps += any(output.saturated for output in outputs)
            if step % scenario.record_every == 0:
                rows.append(self._sample(t, outputs))
            if step == n_steps:
                break
            try:
                self.x = rk4_step(self._derivative(outputs), t, self.x, dt)
            except IntegrationDivergedError as exc:
                raise ScenarioFailedError("state", exc.time) from exc
            self._check_finite(t + dt)
        if saturated_steps:
            logger.warning(
                "scenario_invalid_saturation",
                extra={"scenario": scenario.name, "saturated_steps": saturated_steps},
            )
        data = np.asarray(rows)
        columns = {name: data[:, k] for k, name in enumerate(self._columns())}
        return Trace(
            sample_period=scenario.sample_period,
            columns=columns,
            name=scenario.name,
            saturated_steps=saturated_steps,
        )


def simulate(scenario: Scenario) -> Trace:
    with log_elapsed(logger, "scenario_completed", scenario=scenario.name) as details:
        trace = MicrogridSimulator(scenario).run()
        details["samples"] = len(trace)
    return trace


# ---------------------------------------------------------------------------
# sweeps


class SweepCoordinator:
    """Run independent scenarios on worker threads with bounded concurrency."""

    def __init__(self, *, max_concurrency: int | None = None) -> None:
        self._max_concurrency = max(1, max_concurrency or get_settings().jobs)

    async def run(self, scenarios: Sequence[Scenario]) -> List[Trace]:
        logger.info(
            "sweep_started",
            extra={"scenarios": len(scenarios), "max_concurrency": self._max_concurrency},
        )
        traces: List[Trace] = []
        batch: List[Scenario] = []
        for scenario in scenarios:
            batch.append(scenario)
            if len(batch) >= self._max_concurrency:
                traces.extend(await self._process_batch(batch))
                batch = []
        if batch:
            traces.extend(await self._process_batch(batch))
        logger.info("sweep_completed", extra={"traces": len(traces)})
        return traces

    async def _process_batch(self, batch: List[Scenario]) -> List[Trace]:
        return list(await asyncio.gather(*(self._simulate(scenario) for scenario in batch)))

    async def _simulate(self, scenario: Scenario) -> Trace:
        return await asyncio.to_thread(simulate, scenario)


def run_sweep(scenarios: Sequence[Scenario], *, jobs: int | None = None) -> List[Trace]:
    return asyncio.run(SweepCoordinator(max_concurrency=jobs).run(scenarios))


# ---------------------------------------------------------------------------
# experiments


def _variant(name: str, overrides: Iterable[str], dt: float | None) -> Scenario:
    extra = list(overrides)
    if dt is not None:
        extra.append(f"dt={dt!r}")
        # keep roughly one sample per millisecond
        extra.append(f"record_every={max(1, int(round(1e-3 / dt)))}")
    return load_scenario(name, extra)


def _label(omega_lpf: float) -> str:
    return f"proposed_{omega_lpf / math.pi:g}pi"


def run_power_tracking(
    omega_lpfs: Sequence[float] = OMEGA_LPF_SWEEP,
    *,
    include_conventional: bool = True,
    dt: float | None = None,
    jobs: int | None = None,
) -> Dict[str, tuple[Scenario, Trace]]:
    """Setpoint steps on a stiff grid for each filter cut-off (and the GFL baseline)."""

    variants = {_label(w): _variant("power_tracking", [f"control.omega_lpf={w!r}"], dt) for w in omega_lpfs}
    if include_conventional:
        variants["conventional"] = _variant("power_tracking", ["units.0.kind=gfl_conventional"], dt)
    traces = run_sweep(list(variants.values()), jobs=jobs)
    results = dict(zip(variants, zip(variants.values(), traces)))
    for label, (scenario, trace) in results.items():
        worst = max(
            max(row["error_P"], row["error_Q"]) for row in tracking_errors(trace, scenario)
        )
        logger.info("power_tracking_result", extra={"variant": label, "worst_error": worst})
    return results


@dataclass
class FastLoadStepResult:
    traces: Dict[str, Trace]
    metrics: Dict[str, Metrics]
    rocof_ratio: Dict[str, float] = field(default_factory=dict)


def run_fast_load_step(
    omega_lpfs: Sequence[float] = OMEGA_LPF_SWEEP,
    *,
    dt: float | None = None,
    jobs: int | None = None,
) -> FastLoadStepResult:
    """Sudden load addition in the GFM + GFL microgrid; RoCoF relative to the GFL baseline."""

    variants = {"conventional": _variant("fast_load_step", ["units.1.kind=gfl_conventional"], dt)}
    for w in omega_lpfs:
        variants[_label(w)] = _variant("fast_load_step", [f"control.omega_lpf={w!r}"], dt)
    traces = dict(zip(variants, run_sweep(list(variants.values()), jobs=jobs)))
    metrics = {label: scenario_metrics(traces[label], variants[label]) for label in variants}
    baseline = metrics["conventional"].rocof_max
    ratios = {
        label: metrics[label].rocof_max / baseline for label in variants if label != "conventional"
    }
    logger.info("fast_load_step_result", extra={"rocof_ratio": ratios, "baseline": baseline})
    return FastLoadStepResult(traces=traces, metrics=metrics, rocof_ratio=ratios)


@dataclass
class SlowRampResult:
    trace: Trace
    metrics: Metrics
    gfl_max_deviation: float
    gfm_rise: float
    load_rise: float


def run_slow_load_ramp(*, dt: float | None = None) -> SlowRampResult:
    """Five-second load ramp: the GFM absorbs it while the GFL holds its setpoint."""

    scenario = _variant("slow_load_ramp", [], dt)
    trace = simulate(scenario)
    ramp = next(event for event in scenario.events if event.kind == "load")
    assert ramp.load is not None and ramp.load.ramp_duration is not None
    ramp_end = ramp.time + ramp.load.ramp_duration
    gfl = scenario.unit_under_test.name
    gfm = scenario.forming_unit.name if scenario.forming_unit else gfl
    _, gfl_power = trace.window(f"{gfl}.P", ramp.time, ramp_end + 1.0)
    P_0 = scenario.unit(gfl).P_0
    before = ramp.time
    after = min(ramp_end + 1.0, scenario.duration)
    result = SlowRampResult(
        trace=trace,
        metrics=scenario_metrics(trace, scenario),
        gfl_max_deviation=float(np.max(np.abs(gfl_power - P_0))) / max(abs(P_0), 1.0),
        gfm_rise=trace.mean_before(f"{gfm}.P", after) - trace.mean_before(f"{gfm}.P", before),
        load_rise=trace.mean_before("load.P", after) - trace.mean_before("load.P", before),
    )
    logger.info(
        "slow_load_ramp_result",
        extra={
            "gfl_max_deviation": result.gfl_max_deviation,
            "gfm_rise": result.gfm_rise,
            "load_rise": result.load_rise,
        },
    )
    return result


@dataclass
class TransitionResult:
    traces: Dict[str, Trace]
    metrics: Dict[str, Metrics]
    overshoot_P: Dict[str, float]
    overshoot_Q: Dict[str, float]
    return_transient_P: Dict[str, float]

    @property
    def overshoot_ratio_P(self) -> float:
        sudden = self.overshoot_P["sudden"]
        return self.overshoot_P["smooth"] / sudden if sudden > 0 else math.inf


def run_transition(*, dt: float | None = None, jobs: int | None = None) -> TransitionResult:
    """GFL→GFM at t=2 s (smooth ramp vs. sudden jump) and GFM→GFL at t=7 s."""

    variants = {
        "smooth": _variant("transition", ["events.0.schedule.shape=linear"], dt),
        "sudden": _variant("transition", ["events.0.schedule.shape=jump"], dt),
    }
    traces = dict(zip(variants, run_sweep(list(variants.values()), jobs=jobs)))
    overshoot_P: Dict[str, float] = {}
    overshoot_Q: Dict[str, float] = {}
    returning: Dict[str, float] = {}
    for label, scenario in variants.items():
        trace = traces[label]
        unit = scenario.unit_under_test.name
        up, down = scenario.events[0].time, scenario.events[1].time
        overshoot_P[label] = trace.overshoot(f"{unit}.P", up, down, settle_floor=50.0)
        overshoot_Q[label] = trace.overshoot(f"{unit}.Q", up, down, settle_floor=50.0)
        returning[label] = trace.overshoot(f"{unit}.P", down, None, settle_floor=50.0)
    metrics = {label: scenario_metrics(traces[label], variants[label]) for label in variants}
    result = TransitionResult(traces, metrics, overshoot_P, overshoot_Q, returning)
    logger.info(
        "transition_result",
        extra={"overshoot_P": overshoot_P, "overshoot_Q": overshoot_Q, "return_P": returning},
    )
    return result
