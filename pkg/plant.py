"""Electrical plant: dq transforms, switch-averaged inverter with LC filter, lines and loads.

Conventions
-----------
* Amplitude-invariant dq transform: a balanced set of amplitude ``V`` whose
  phase equals the frame angle maps to ``(d, q) = (V, 0)``.
* A phasor in a frame at angle ``θ`` is ``d + jq``; rotating it into the global
  frame multiplies by ``e^{jθ}``. The global frame rotates at ``ω_0``.
* Powers use the 3/2 factor: ``P + jQ = 3/2 · V · conj(I)``.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from logging_utils import get_logger

logger = get_logger(__name__)

TWO_THIRDS_PI = 2.0 * math.pi / 3.0
SMALL_ANGLE_LIMIT = 0.3


class NetworkConfigError(ValueError):
    """Raised when a network cannot define a PCC voltage."""


class PlantParams(BaseModel):
    """Filter, line and nominal electrical constants of one inverter branch."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    R_i: float = Field(0.2, ge=0.0, description="filter resistance [ohm]")
    L_i: float = Field(3.3e-3, gt=0.0, description="filter inductance [H]")
    C_i: float = Field(40e-6, gt=0.0, description="filter capacitance [F]")
    R_g: float = Field(0.1, ge=0.0, description="line resistance [ohm]")
    L_g: float = Field(1.86e-3, gt=0.0, description="line inductance [H]")
    V_dc: float = Field(1000.0, gt=0.0, description="DC-link voltage [V]")
    V_0: float = Field(391.0, gt=0.0, description="nominal phase amplitude [V]")
    omega_0: float = Field(2.0 * math.pi * 60.0, gt=0.0, description="nominal frequency [rad/s]")

    @property
    def line_impedance(self) -> complex:
        return complex(self.R_g, self.omega_0 * self.L_g)

    @property
    def Z_g(self) -> float:
        """Line impedance magnitude at ``ω_0``."""

        return abs(self.line_impedance)

    @property
    def phi(self) -> float:
        """Line impedance angle at ``ω_0``."""

        return cmath.phase(self.line_impedance)


class DqPair(NamedTuple):
    d: float
    q: float

    @classmethod
    def from_complex(cls, value: complex) -> "DqPair":
        return cls(value.real, value.imag)

    def as_complex(self) -> complex:
        return complex(self.d, self.q)

    @property
    def magnitude(self) -> float:
        return math.hypot(self.d, self.q)


ZERO = DqPair(0.0, 0.0)


@dataclass(frozen=True)
class InverterState:
    """Filter, line and frame-angle state of one inverter, in its own dq frame.

    ``theta`` is the frame angle relative to the global ``ω_0`` frame and is
    kept unwrapped; ``wrapped_theta`` is for reporting.
    """

    i_L: DqPair
    V_c: DqPair
    i_g: DqPair
    theta: float = 0.0

    SIZE = 7

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.i_L.d, self.i_L.q, self.V_c.d, self.V_c.q, self.i_g.d, self.i_g.q, self.theta]
        )

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "InverterState":
        return cls(
            i_L=DqPair(float(values[0]), float(values[1])),
            V_c=DqPair(float(values[2]), float(values[3])),
            i_g=DqPair(float(values[4]), float(values[5])),
            theta=float(values[6]),
        )

    @property
    def wrapped_theta(self) -> float:
        return self.theta % (2.0 * math.pi)


@dataclass(frozen=True)
class GridState:
    """Stiff grid source seen from the PCC."""

    V_g: float
    omega_g: float
    theta_g: float = 0.0
    delta: float = 0.0

    def __post_init__(self) -> None:
        if self.V_g < 0:
            raise ValueError("grid amplitude must be non-negative")

    def angle_at(self, t: float, omega_0: float) -> float:
        """Grid angle relative to the global frame at time ``t``."""

        return self.theta_g + (self.omega_g - omega_0) * t

    def phasor_at(self, t: float, omega_0: float) -> complex:
        return cmath.rect(self.V_g, self.angle_at(t, omega_0))


class LoadSpec(BaseModel):
    """Constant-impedance load, sized from ``(P_load, Q_load)`` at ``V_0``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    P_load: float = Field(ge=0.0)
    Q_load: float = 0.0
    model: Literal["constant_impedance"] = "constant_impedance"
    activation: Literal["step", "ramp"] = "step"
    start_time: float = Field(0.0, ge=0.0)
    ramp_duration: float | None = None

    @model_validator(mode="after")
    def _check_ramp(self) -> "LoadSpec":
        if self.activation == "ramp" and not (self.ramp_duration and self.ramp_duration > 0):
            raise ValueError("ramp activation needs a positive ramp_duration")
        return self

    def fraction(self, t: float) -> float:
        """Connected share of the load at time ``t`` (0 before start, 1 when complete)."""

        if t < self.start_time:
            return 0.0
        if self.activation == "step":
            return 1.0
        assert self.ramp_duration is not None
        return min(1.0, (t - self.start_time) / self.ramp_duration)

    def admittance(self, t: float, V_0: float) -> complex:
        """Quasi-static admittance ``G - jB`` at ``ω_0`` in the amplitude-invariant frame."""

        scale = self.fraction(t) * 2.0 / (3.0 * V_0 * V_0)
        return complex(self.P_load * scale, -self.Q_load * scale)


def abc_to_dq(v_a: float, v_b: float, v_c: float, theta: float) -> DqPair:
    """Amplitude-invariant Park transform into the frame at angle ``theta``."""

    d = (2.0 / 3.0) * (
        v_a * math.cos(theta)
        + v_b * math.cos(theta - TWO_THIRDS_PI)
        + v_c * math.cos(theta + TWO_THIRDS_PI)
    )
    q = -(2.0 / 3.0) * (
        v_a * math.sin(theta)
        + v_b * math.sin(theta - TWO_THIRDS_PI)
        + v_c * math.sin(theta + TWO_THIRDS_PI)
    )
    return DqPair(d, q)


def dq_to_abc(p: DqPair, theta: float) -> tuple[float, float, float]:
    """Inverse of :func:`abc_to_dq`."""

    phases = (theta, theta - TWO_THIRDS_PI, theta + TWO_THIRDS_PI)
    return tuple(p.d * math.cos(a) - p.q * math.sin(a) for a in phases)  # type: ignore[return-value]


def limit_modulation(m: DqPair) -> tuple[DqPair, bool]:
    """Scale ``m`` onto the unit circle when its magnitude exceeds one."""

    magnitude = m.magnitude
    if magnitude <= 1.0:
        return m, False
    return DqPair(m.d / magnitude, m.q / magnitude), True


def inverter_derivatives(
    x: InverterState,
    m: DqPair,
    params: PlantParams,
    omega: float,
    v_pcc: DqPair,
) -> tuple[np.ndarray, bool]:
    """Time derivatives of one inverter branch in a frame rotating at ``omega``.

    Returns the derivative in :meth:`InverterState.to_array` layout and the
    modulation saturation flag.
    """

    m, saturated = limit_modulation(m)
    half_dc = 0.5 * params.V_dc
    i_L, V_c, i_g = x.i_L, x.V_c, x.i_g
    d_iL_d = (m.d * half_dc + omega * params.L_i * i_L.q - V_c.d - params.R_i * i_L.d) / params.L_i
    d_iL_q = (m.q * half_dc - omega * params.L_i * i_L.d - V_c.q - params.R_i * i_L.q) / params.L_i
    d_Vc_d = (i_L.d - i_g.d) / params.C_i + omega * V_c.q
    d_Vc_q = (i_L.q - i_g.q) / params.C_i - omega * V_c.d
    d_ig_d = (V_c.d - v_pcc.d - params.R_g * i_g.d) / params.L_g + omega * i_g.q
    d_ig_q = (V_c.q - v_pcc.q - params.R_g * i_g.q) / params.L_g - omega * i_g.d
    d_theta = omega - params.omega_0
    return (
        np.array([d_iL_d, d_iL_q, d_Vc_d, d_Vc_q, d_ig_d, d_ig_q, d_theta]),
        saturated,
    )


def power_from_dq(V_c: DqPair, i_g: DqPair) -> tuple[float, float]:
    """Instantaneous ``(P, Q)`` in the amplitude-invariant convention."""

    P = 1.5 * (V_c.d * i_g.d + V_c.q * i_g.q)
    Q = 1.5 * (V_c.q * i_g.d - V_c.d * i_g.q)
    return P, Q


def linearized_power_flow(
    V_c_bar: float,
    delta: float,
    params: PlantParams,
    V_g_bar: float | None = None,
) -> tuple[float, float]:
    """Small-angle, purely inductive power flow around ``δ = 0``, ``V̄_g = V_0``."""

    if abs(delta) > SMALL_ANGLE_LIMIT:
        logger.warning(
            "power_flow_linearization_outside_range",
            extra={"delta": delta, "limit": SMALL_ANGLE_LIMIT},
        )
    V_g_bar = params.V_0 if V_g_bar is None else V_g_bar
    P = params.V_0 * params.V_0 / params.Z_g * delta
    Q = params.V_0 / params.Z_g * (V_c_bar - V_g_bar)
    return P, Q


def exact_power_flow(
    V_c_bar: float,
    delta: float,
    params: PlantParams,
    V_g_bar: float | None = None,
    phi: float | None = None,
) -> tuple[float, float]:
    """Two-bus complex power ``V_c (conj((V_c - V_g)/(Z e^{jφ})))``.

    ``phi`` defaults to the line angle; ``math.pi / 2`` gives the purely
    inductive line that the linearization assumes.
    """

    V_g_bar = params.V_0 if V_g_bar is None else V_g_bar
    phi = params.phi if phi is None else phi
    v_c = cmath.rect(V_c_bar, delta)
    current = (v_c - V_g_bar) / cmath.rect(params.Z_g, phi)
    power = v_c * current.conjugate()
    return power.real, power.imag


@dataclass(frozen=True)
class NetworkSolution:
    """PCC quantities for one instant, per inverter in its local frame."""

    v_pcc: tuple[DqPair, ...]
    v_bus: complex
    load_current: complex
    injected_current: complex


@dataclass(frozen=True)
class Network:
    """Inverter branches meeting at one PCC bus with loads and an optional stiff grid."""

    params: PlantParams
    loads: tuple[LoadSpec, ...]
    grid_breaker: Literal["open", "closed"]
    forming: tuple[bool, ...]
    grid: GridState | None = None

    def __post_init__(self) -> None:
        if self.grid_breaker == "closed":
            if self.grid is None:
                raise NetworkConfigError("closed grid breaker needs a grid source")
            return
        if not any(self.forming):
            logger.error(
                "network_without_forming_element",
                extra={"inverters": len(self.forming)},
            )
            raise NetworkConfigError(
                "islanded network needs a grid-forming inverter or a closed grid breaker"
            )
        if not any(load.start_time == 0.0 and load.P_load > 0 for load in self.loads):
            raise NetworkConfigError("islanded network needs a resistive load connected at t=0")

    def admittance(self, t: float) -> complex:
        return sum((load.admittance(t, self.params.V_0) for load in self.loads), 0j)


def network_step_context(
    inverters: Sequence[InverterState],
    network: Network,
    t: float,
) -> NetworkSolution:
    """Solve the algebraic PCC bus for the current line currents.

    Line currents are states of each branch; the bus voltage follows from the
    stiff grid when the breaker is closed, otherwise from Kirchhoff's current
    law across the load admittance.
    """

    injected = sum(
        (x.i_g.as_complex() * cmath.exp(1j * x.theta) for x in inverters),
        0j,
    )
    admittance = network.admittance(t)
    if network.grid_breaker == "closed":
        assert network.grid is not None
        v_bus = network.grid.phasor_at(t, network.params.omega_0)
    else:
        v_bus = injected / admittance
    v_pcc = tuple(
        DqPair.from_complex(v_bus * cmath.exp(-1j * x.theta)) for x in inverters
    )
    return NetworkSolution(
        v_pcc=v_pcc,
        v_bus=v_bus,
        load_current=admittance * v_bus,
        injected_current=injected,
    )
