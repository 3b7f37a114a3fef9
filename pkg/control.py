"""Inverter controllers: inner loops, PLL, conventional GFL, GFM droop and the ε-shaped GFL.

Controllers are sampled at the simulation step and hold their outputs over it.
First-order elements use exact zero-order-hold discretization, so the
``k_i/(s + ε)`` path stays well behaved when ε jumps.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Literal

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, model_validator

from logging_utils import get_logger
from plant import DqPair, InverterState, PlantParams, limit_modulation, power_from_dq

logger = get_logger(__name__)

OMEGA_0 = 2.0 * math.pi * 60.0
RATIO_TOLERANCE = 1e-9


class InnerLoopConfig(BaseModel):
    """Current loop ``K_c = (L_i s + R_i)/(τ_c s)`` and voltage loop ``K_v = k_pV + k_iV/s``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tau_c: float = Field(2e-4, gt=0.0)
    k_pV: float = Field(0.08, ge=0.0)
    k_iV: float = Field(0.4, ge=0.0)


class PllConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_p: float = Field(0.5, ge=0.0)
    k_i: float = Field(50.0, ge=0.0)

    @model_validator(mode="after")
    def _not_both_zero(self) -> "PllConfig":
        if self.k_p == 0.0 and self.k_i == 0.0:
            raise ValueError("PLL gains cannot both be zero")
        return self


class DroopConfig(BaseModel):
    """Pf-QV droop slopes and power-measurement filter cut-off."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    k_p: float = Field(2e-4, gt=0.0, description="(rad/s)/W")
    k_q: float = Field(2e-4, gt=0.0, description="V/VAR")
    omega_lpf: float = Field(20.0 * math.pi, gt=0.0)


class ProposedConfig(BaseModel):
    """Gains of the ε-shaped power controller.

    The live ε values belong to the controller state; ``eps_max`` bounds them.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    k_pP: float = Field(2e-4, gt=0.0, description="(rad/s)/W")
    k_iP: float = Field(gt=0.0, description="(rad/s)/(W s)")
    k_pQ: float = Field(2e-4, gt=0.0, description="V/VAR")
    k_iQ: float = Field(gt=0.0, description="V/(VAR s)")
    omega_lpf: float = Field(20.0 * math.pi, gt=0.0)
    eps_max: float = Field(200.0, ge=0.0)

    @model_validator(mode="after")
    def _robustness_shaping(self) -> "ProposedConfig":
        # ratio == omega_lpf (the default reactive tuning) must survive rounding
        limit = self.omega_lpf * (1.0 + RATIO_TOLERANCE)
        if self.k_iP / self.k_pP > limit:
            raise ValueError(
                f"k_iP/k_pP = {self.k_iP / self.k_pP:.6g} exceeds omega_lpf = {self.omega_lpf:.6g}"
            )
        if self.k_iQ / self.k_pQ > limit:
            raise ValueError(
                f"k_iQ/k_pQ = {self.k_iQ / self.k_pQ:.6g} exceeds omega_lpf = {self.omega_lpf:.6g}"
            )
        return self

    @classmethod
    def from_ratios(
        cls,
        omega_lpf: float,
        *,
        k_pP: float = 2e-4,
        k_pQ: float = 2e-4,
        k_iP_ratio: float = 0.1,
        k_iQ_ratio: float = 1.0,
        eps_max: float = 200.0,
    ) -> "ProposedConfig":
        """Integral gains as ``ratio · ω_lpf · k_p`` (0.1 and 1.0 by default)."""

        return cls(
            k_pP=k_pP,
            k_iP=k_iP_ratio * omega_lpf * k_pP,
            k_pQ=k_pQ,
            k_iQ=k_iQ_ratio * omega_lpf * k_pQ,
            omega_lpf=omega_lpf,
            eps_max=eps_max,
        )

    def as_droop(self) -> DroopConfig:
        """The pure droop this controller approaches as ε grows."""

        return DroopConfig(k_p=self.k_pP, k_q=self.k_pQ, omega_lpf=self.omega_lpf)


class ControlSection(BaseModel):
    """Controller parameters shared by every unit of a scenario."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    inner: InnerLoopConfig = InnerLoopConfig()
    pll: PllConfig = PllConfig()
    droop: DroopConfig = DroopConfig()
    omega_lpf: float = Field(
        20.0 * math.pi, gt=0.0, validation_alias=AliasChoices("omega_lpf", "wlpf")
    )
    k_pP: float = Field(2e-4, gt=0.0)
    k_pQ: float = Field(2e-4, gt=0.0)
    k_iP_ratio: float = Field(0.1, gt=0.0)
    k_iQ_ratio: float = Field(1.0, gt=0.0)
    eps_max: float = Field(200.0, ge=0.0)

    @model_validator(mode="after")
    def _check_proposed(self) -> "ControlSection":
        try:
            self.proposed()
        except ValidationError as exc:
            raise ValueError(exc.errors()[0]["msg"]) from None
        return self

    def proposed(self) -> ProposedConfig:
        return ProposedConfig.from_ratios(
            self.omega_lpf,
            k_pP=self.k_pP,
            k_pQ=self.k_pQ,
            k_iP_ratio=self.k_iP_ratio,
            k_iQ_ratio=self.k_iQ_ratio,
            eps_max=self.eps_max,
        )


class TransitionSchedule(BaseModel):
    """Time profile of ε for one mode transition."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    direction: Literal["gfl_to_gfm", "gfm_to_gfl"] = "gfl_to_gfm"
    start_time: float = Field(0.0, ge=0.0)
    ramp_rate: float = Field(100.0, gt=0.0, description="dε/dt [1/s²]")
    eps_max: float = Field(200.0, ge=0.0)
    shape: Literal["linear", "smoothstep", "jump"] = "linear"

    @property
    def duration(self) -> float:
        if self.direction == "gfm_to_gfl" or self.shape == "jump":
            return 0.0
        return self.eps_max / self.ramp_rate


class Setpoint(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    P_0: float = 0.0
    Q_0: float = 0.0
    V_0: float = Field(391.0, gt=0.0)
    omega_0: float = Field(OMEGA_0, gt=0.0)

    def with_changes(self, P_0: float | None = None, Q_0: float | None = None) -> "Setpoint":
        updates = {}
        if P_0 is not None:
            updates["P_0"] = P_0
        if Q_0 is not None:
            updates["Q_0"] = Q_0
        return self.model_copy(update=updates)

    def grid_current_reference(self) -> DqPair:
        """``i_g,ref = (2P_0/(3V_0), -2Q_0/(3V_0))``."""

        scale = 2.0 / (3.0 * self.V_0)
        return DqPair(scale * self.P_0, -scale * self.Q_0)


def epsilon_at(t: float, schedule: TransitionSchedule) -> float:
    """ε at time ``t``; monotone over the transition."""

    elapsed = t - schedule.start_time
    if schedule.direction == "gfm_to_gfl":
        return schedule.eps_max if elapsed < 0.0 else 0.0
    if elapsed < 0.0:
        return 0.0
    if schedule.shape == "jump":
        return schedule.eps_max
    if schedule.shape == "linear":
        return min(schedule.ramp_rate * elapsed, schedule.eps_max)
    duration = schedule.duration
    u = 1.0 if duration == 0.0 else min(1.0, elapsed / duration)
    return schedule.eps_max * u * u * (3.0 - 2.0 * u)


def _lag_coefficient(rate: float, dt: float) -> float:
    """``1 - e^{-rate·dt}``: ZOH gain of a unit-DC-gain first-order lag."""

    return -math.expm1(-rate * dt)


def _shifted_integrator_gain(eps: float, dt: float) -> tuple[float, float]:
    """ZOH coefficients ``(a, b)`` of ``ẋ = -εx + u``: ``x⁺ = a·x + b·u``."""

    if eps * dt < 1e-12:
        return 1.0, dt
    return math.exp(-eps * dt), -math.expm1(-eps * dt) / eps


@dataclass
class PowerFilterState:
    P: float = 0.0
    Q: float = 0.0


def power_measurement(
    V_c: DqPair,
    i_g: DqPair,
    omega_lpf: float,
    state: PowerFilterState,
    dt: float,
) -> tuple[float, float]:
    """First-order low-pass of the instantaneous power."""

    if not dt > 0:
        raise ValueError("dt must be positive")
    P, Q = power_from_dq(V_c, i_g)
    gain = _lag_coefficient(omega_lpf, dt)
    state.P += gain * (P - state.P)
    state.Q += gain * (Q - state.Q)
    return state.P, state.Q


@dataclass
class PllState:
    integrator: float = 0.0
    omega: float = OMEGA_0


def pll_step(
    state: PllState,
    V_c_q: float,
    dt: float,
    cfg: PllConfig,
    omega_0: float = OMEGA_0,
) -> float:
    """Synchronous-frame PLL: PI on ``V_c^q`` drives the frame frequency."""

    if not dt > 0:
        raise ValueError("dt must be positive")
    state.omega = omega_0 + cfg.k_p * V_c_q + state.integrator
    state.integrator += cfg.k_i * V_c_q * dt
    return state.omega


@dataclass
class InnerLoopState:
    current_integral: DqPair = field(default_factory=lambda: DqPair(0.0, 0.0))
    voltage_integral: DqPair = field(default_factory=lambda: DqPair(0.0, 0.0))
    saturated: bool = False


def current_control(
    i_L_ref: DqPair,
    i_L: DqPair,
    V_c: DqPair,
    cfg: InnerLoopConfig,
    params: PlantParams,
    omega_0: float,
    state: InnerLoopState,
    dt: float,
) -> DqPair:
    """Decoupled current loop returning the limited modulation index.

    ``K_c`` is the PI ``L_i/τ_c + R_i/(τ_c s)``, so ``K_c G_i = 1/(τ_c s)``. The
    integral is frozen while the modulation saturates.
    """

    error = DqPair(i_L_ref.d - i_L.d, i_L_ref.q - i_L.q)
    kp = params.L_i / cfg.tau_c
    ki = params.R_i / cfg.tau_c
    integral = state.current_integral
    v_d = kp * error.d + ki * integral.d - params.L_i * omega_0 * i_L.q + V_c.d
    v_q = kp * error.q + ki * integral.q + params.L_i * omega_0 * i_L.d + V_c.q
    half_dc = 0.5 * params.V_dc
    m, saturated = limit_modulation(DqPair(v_d / half_dc, v_q / half_dc))
    if saturated and not state.saturated:
        logger.warning("modulation_saturated", extra={"m_d": v_d / half_dc, "m_q": v_q / half_dc})
    state.saturated = saturated
    if not saturated:
        state.current_integral = DqPair(integral.d + error.d * dt, integral.q + error.q * dt)
    return m


def voltage_control(
    V_c_ref: DqPair,
    V_c: DqPair,
    i_g: DqPair,
    cfg: InnerLoopConfig,
    params: PlantParams,
    omega_0: float,
    state: InnerLoopState,
    dt: float,
) -> DqPair:
    """Capacitor-voltage loop with decoupling and output-current feed-forward."""

    error = DqPair(V_c_ref.d - V_c.d, V_c_ref.q - V_c.q)
    integral = state.voltage_integral
    i_d = cfg.k_pV * error.d + cfg.k_iV * integral.d - params.C_i * omega_0 * V_c.q + i_g.d
    i_q = cfg.k_pV * error.q + cfg.k_iV * integral.q + params.C_i * omega_0 * V_c.d + i_g.q
    if not state.saturated:
        state.voltage_integral = DqPair(integral.d + error.d * dt, integral.q + error.q * dt)
    return DqPair(i_d, i_q)


@dataclass
class ConventionalGflState:
    pll: PllState = field(default_factory=PllState)
    inner: InnerLoopState = field(default_factory=InnerLoopState)


def gfl_conventional_step(
    state: ConventionalGflState,
    setpoint: Setpoint,
    measurements: InverterState,
    dt: float,
    *,
    pll_cfg: PllConfig,
    params: PlantParams,
) -> tuple[DqPair, float]:
    """Open-loop power command through the grid-current reference; PLL frequency."""

    omega = pll_step(state.pll, measurements.V_c.q, dt, pll_cfg, setpoint.omega_0)
    i_g_ref = setpoint.grid_current_reference()
    V_c = measurements.V_c
    i_L_ref = DqPair(
        i_g_ref.d - params.C_i * omega * V_c.q,
        i_g_ref.q + params.C_i * omega * V_c.d,
    )
    return i_L_ref, omega


@dataclass
class DroopState:
    power: PowerFilterState = field(default_factory=PowerFilterState)
    inner: InnerLoopState = field(default_factory=InnerLoopState)


def gfm_droop_step(
    state: DroopState,
    setpoint: Setpoint,
    P: float,
    Q: float,
    dt: float,
    *,
    cfg: DroopConfig,
) -> tuple[float, float]:
    """Pf-QV droop on filtered power; returns ``(ω, V_ref)``."""

    gain = _lag_coefficient(cfg.omega_lpf, dt)
    state.power.P += gain * (P - state.power.P)
    state.power.Q += gain * (Q - state.power.Q)
    omega = setpoint.omega_0 + cfg.k_p * (setpoint.P_0 - state.power.P)
    V_ref = setpoint.V_0 + cfg.k_q * (setpoint.Q_0 - state.power.Q)
    return omega, V_ref


@dataclass
class ProposedState:
    power: PowerFilterState = field(default_factory=PowerFilterState)
    inner: InnerLoopState = field(default_factory=InnerLoopState)
    x_P: float = 0.0
    x_Q: float = 0.0
    eps_P: float = 0.0
    eps_Q: float = 0.0


def gfl_proposed_step(
    state: ProposedState,
    setpoint: Setpoint,
    P: float,
    Q: float,
    eps_P: float,
    eps_Q: float,
    dt: float,
    *,
    cfg: ProposedConfig,
) -> tuple[float, float]:
    """``[k_p + k_i/(s+ε)]·ω_lpf/(s+ω_lpf)`` on each power error; returns ``(ω, V_ref)``."""

    if not (0.0 <= eps_P <= cfg.eps_max and 0.0 <= eps_Q <= cfg.eps_max):
        raise ValueError(f"epsilon outside [0, {cfg.eps_max}]: ({eps_P}, {eps_Q})")
    state.eps_P, state.eps_Q = eps_P, eps_Q
    gain = _lag_coefficient(cfg.omega_lpf, dt)
    state.power.P += gain * (P - state.power.P)
    state.power.Q += gain * (Q - state.power.Q)
    error_P = setpoint.P_0 - state.power.P
    error_Q = setpoint.Q_0 - state.power.Q
    omega = setpoint.omega_0 + cfg.k_pP * error_P + state.x_P
    V_ref = setpoint.V_0 + cfg.k_pQ * error_Q + state.x_Q
    if not state.inner.saturated:
        a_P, b_P = _shifted_integrator_gain(eps_P, dt)
        a_Q, b_Q = _shifted_integrator_gain(eps_Q, dt)
        state.x_P = a_P * state.x_P + b_P * cfg.k_iP * error_P
        state.x_Q = a_Q * state.x_Q + b_Q * cfg.k_iQ * error_Q
    return omega, V_ref


@dataclass(frozen=True)
class ControlOutput:
    m: DqPair
    omega: float
    saturated: bool
    eps_P: float = 0.0
    eps_Q: float = 0.0


class Controller(ABC):
    """Common interface used by the scenario engine."""

    kind: str = "controller"
    forming: bool = False

    def __init__(self, setpoint: Setpoint, params: PlantParams, inner: InnerLoopConfig) -> None:
        self.setpoint = setpoint
        self.params = params
        self.inner = inner

    @abstractmethod
    def control(self, x: InverterState, t: float, dt: float) -> ControlOutput:
        """Return the held modulation index and measurements for one step."""

    def initialise(self, x: InverterState, omega: float | None = None) -> None:
        """Seed integrators so that ``x`` is close to an equilibrium at frequency ``omega``."""

    def _voltage_source(
        self, inner_state: InnerLoopState, x: InverterState, V_ref: float, dt: float
    ) -> DqPair:
        i_L_ref = voltage_control(
            DqPair(V_ref, 0.0), x.V_c, x.i_g, self.inner, self.params,
            self.setpoint.omega_0, inner_state, dt,
        )
        return current_control(
            i_L_ref, x.i_L, x.V_c, self.inner, self.params,
            self.setpoint.omega_0, inner_state, dt,
        )

    def _seed_current_integral(self, inner_state: InnerLoopState, x: InverterState) -> None:
        tau = self.inner.tau_c
        inner_state.current_integral = DqPair(tau * x.i_L.d, tau * x.i_L.q)


class ConventionalGflController(Controller):
    kind = "gfl_conventional"

    def __init__(
        self, setpoint: Setpoint, params: PlantParams, inner: InnerLoopConfig, pll: PllConfig
    ) -> None:
        super().__init__(setpoint, params, inner)
        self.pll = pll
        self.state = ConventionalGflState()

    def initialise(self, x: InverterState, omega: float | None = None) -> None:
        if omega is not None:
            self.state.pll.integrator = omega - self.setpoint.omega_0
            self.state.pll.omega = omega
        self._seed_current_integral(self.state.inner, x)

    def control(self, x: InverterState, t: float, dt: float) -> ControlOutput:
        i_L_ref, omega = gfl_conventional_step(
            self.state, self.setpoint, x, dt, pll_cfg=self.pll, params=self.params
        )
        m = current_control(
            i_L_ref, x.i_L, x.V_c, self.inner, self.params,
            self.setpoint.omega_0, self.state.inner, dt,
        )
        return ControlOutput(m=m, omega=omega, saturated=self.state.inner.saturated)


class GfmDroopController(Controller):
    kind = "gfm"
    forming = True

    def __init__(
        self, setpoint: Setpoint, params: PlantParams, inner: InnerLoopConfig, droop: DroopConfig
    ) -> None:
        super().__init__(setpoint, params, inner)
        self.droop = droop
        self.state = DroopState()

    def initialise(self, x: InverterState, omega: float | None = None) -> None:
        self.state.power.P, self.state.power.Q = power_from_dq(x.V_c, x.i_g)
        self._seed_current_integral(self.state.inner, x)

    def droop_frequency(self) -> float:
        """Frequency the droop law commands for the current filtered power."""

        return self.setpoint.omega_0 + self.droop.k_p * (self.setpoint.P_0 - self.state.power.P)

    def control(self, x: InverterState, t: float, dt: float) -> ControlOutput:
        P, Q = power_from_dq(x.V_c, x.i_g)
        omega, V_ref = gfm_droop_step(self.state, self.setpoint, P, Q, dt, cfg=self.droop)
        m = self._voltage_source(self.state.inner, x, V_ref, dt)
        return ControlOutput(m=m, omega=omega, saturated=self.state.inner.saturated)


class ProposedGflController(Controller):
    """ε-shaped GFL; ε follows the most recently started transition schedule."""

    kind = "gfl_proposed"

    def __init__(
        self,
        setpoint: Setpoint,
        params: PlantParams,
        inner: InnerLoopConfig,
        cfg: ProposedConfig,
        schedules: tuple[TransitionSchedule, ...] = (),
    ) -> None:
        super().__init__(setpoint, params, inner)
        self.cfg = cfg
        self.schedules = tuple(sorted(schedules, key=lambda s: s.start_time))
        self.state = ProposedState()

    def epsilon(self, t: float) -> float:
        active = [s for s in self.schedules if s.start_time <= t]
        if not active:
            return 0.0
        return min(epsilon_at(t, active[-1]), self.cfg.eps_max)

    def initialise(self, x: InverterState, omega: float | None = None) -> None:
        P, Q = power_from_dq(x.V_c, x.i_g)
        self.state.power.P, self.state.power.Q = P, Q
        offset = 0.0 if omega is None else omega - self.setpoint.omega_0
        self.state.x_P = offset - self.cfg.k_pP * (self.setpoint.P_0 - P)
        self.state.x_Q = x.V_c.magnitude - self.setpoint.V_0 - self.cfg.k_pQ * (self.setpoint.Q_0 - Q)
        self._seed_current_integral(self.state.inner, x)

    def control(self, x: InverterState, t: float, dt: float) -> ControlOutput:
        P, Q = power_from_dq(x.V_c, x.i_g)
        eps = self.epsilon(t)
        omega, V_ref = gfl_proposed_step(
            self.state, self.setpoint, P, Q, eps, eps, dt, cfg=self.cfg
        )
        m = self._voltage_source(self.state.inner, x, V_ref, dt)
        return ControlOutput(
            m=m, omega=omega, saturated=self.state.inner.saturated, eps_P=eps, eps_Q=eps
        )
