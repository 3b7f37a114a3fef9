from __future__ import annotations

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import signal

from analysis import voltage_loop_tf
from control import (
    ControlSection,
    Controller,
    ConventionalGflState,
    DroopState,
    GfmDroopController,
    InnerLoopConfig,
    InnerLoopState,
    PllConfig,
    PllState,
    PowerFilterState,
    ProposedConfig,
    ProposedGflController,
    ProposedState,
    Setpoint,
    TransitionSchedule,
    current_control,
    epsilon_at,
    gfl_conventional_step,
    gfl_proposed_step,
    gfm_droop_step,
    pll_step,
    power_measurement,
    voltage_control,
)
from plant import DqPair, InverterState, PlantParams, power_from_dq

DT = 1e-4


def _held_state(P: float) -> ProposedState:
    state = ProposedState()
    state.power.P = P
    return state


def test_proposed_config_rejects_integral_corner_above_filter() -> None:
    with pytest.raises(ValidationError, match="exceeds omega_lpf"):
        ProposedConfig(k_pP=2e-4, k_iP=2e-4 * 100.0, k_pQ=2e-4, k_iQ=2e-4, omega_lpf=20.0 * math.pi)


def test_proposed_config_from_ratios(cfg: ProposedConfig) -> None:
    assert cfg.k_iP == pytest.approx(0.1 * 20.0 * math.pi * 2e-4)
    assert cfg.k_iQ == pytest.approx(20.0 * math.pi * 2e-4)
    droop = cfg.as_droop()
    assert (droop.k_p, droop.k_q, droop.omega_lpf) == (cfg.k_pP, cfg.k_pQ, cfg.omega_lpf)


def test_control_section_accepts_wlpf_alias_and_checks_ratios() -> None:
    section = ControlSection.model_validate({"wlpf": 4.0 * math.pi})
    assert section.proposed().omega_lpf == pytest.approx(4.0 * math.pi)
    with pytest.raises(ValidationError, match="exceeds omega_lpf"):
        ControlSection.model_validate({"k_iQ_ratio": 1.5})


def test_pll_gains_cannot_both_be_zero() -> None:
    with pytest.raises(ValidationError):
        PllConfig(k_p=0.0, k_i=0.0)


def test_epsilon_linear_schedule() -> None:
    schedule = TransitionSchedule(start_time=1.0, ramp_rate=100.0, eps_max=200.0)
    assert schedule.duration == pytest.approx(2.0)
    assert epsilon_at(0.5, schedule) == 0.0
    assert epsilon_at(1.5, schedule) == pytest.approx(50.0)
    assert epsilon_at(4.0, schedule) == 200.0
    samples = [epsilon_at(1.0 + 0.01 * k, schedule) for k in range(300)]
    assert all(b >= a for a, b in zip(samples, samples[1:]))


def test_epsilon_smoothstep_and_jump_shapes() -> None:
    smooth = TransitionSchedule(start_time=1.0, ramp_rate=100.0, eps_max=200.0, shape="smoothstep")
    assert epsilon_at(2.0, smooth) == pytest.approx(100.0)
    assert epsilon_at(1.2, smooth) < 100.0 * 0.2
    jump = TransitionSchedule(start_time=1.0, eps_max=200.0, shape="jump")
    assert jump.duration == 0.0
    assert epsilon_at(0.999, jump) == 0.0
    assert epsilon_at(1.0, jump) == 200.0


def test_epsilon_return_to_following() -> None:
    schedule = TransitionSchedule(direction="gfm_to_gfl", start_time=7.0, eps_max=200.0)
    assert epsilon_at(6.9, schedule) == 200.0
    assert epsilon_at(7.0, schedule) == 0.0


def test_power_measurement_is_exact_first_order_lag() -> None:
    state = PowerFilterState()
    omega_lpf = 20.0 * math.pi
    for _ in range(100):
        P, _ = power_measurement(DqPair(391.0, 0.0), DqPair(17.05, 0.0), omega_lpf, state, DT)
    expected = 1.5 * 391.0 * 17.05 * (1.0 - math.exp(-omega_lpf * 100 * DT))
    assert P == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValueError):
        power_measurement(DqPair(0.0, 0.0), DqPair(0.0, 0.0), omega_lpf, state, 0.0)


def test_pll_tracks_quadrature_voltage() -> None:
    cfg = PllConfig(k_p=0.5, k_i=50.0)
    state = PllState()
    omega = pll_step(state, 2.0, DT, cfg)
    assert omega == pytest.approx(2.0 * math.pi * 60.0 + 1.0)
    assert state.integrator == pytest.approx(50.0 * 2.0 * DT)
    assert pll_step(PllState(), 0.0, DT, cfg) == pytest.approx(2.0 * math.pi * 60.0)


def test_setpoint_current_reference() -> None:
    reference = Setpoint(P_0=10000.0, Q_0=2000.0).grid_current_reference()
    assert reference.d == pytest.approx(17.05, rel=1e-3)
    assert reference.q == pytest.approx(-3.41, rel=1e-3)


def test_droop_static_characteristic() -> None:
    droop = ProposedConfig.from_ratios(20.0 * math.pi).as_droop()
    setpoint = Setpoint(P_0=10000.0, Q_0=0.0)
    state = DroopState()
    state.power.P, state.power.Q = 11000.0, 500.0
    omega, V_ref = gfm_droop_step(state, setpoint, 11000.0, 500.0, DT, cfg=droop)
    assert omega == pytest.approx(setpoint.omega_0 - 0.2)
    assert V_ref == pytest.approx(391.0 - 0.1)


def test_proposed_integrator_matches_closed_form_for_constant_error(cfg: ProposedConfig) -> None:
    setpoint = Setpoint(P_0=11000.0)
    steps = 2000
    for eps in (0.0, 50.0):
        state = _held_state(10000.0)
        for _ in range(steps):
            gfl_proposed_step(state, setpoint, 10000.0, 0.0, eps, eps, DT, cfg=cfg)
        elapsed = steps * DT
        if eps == 0.0:
            expected = cfg.k_iP * 1000.0 * elapsed
        else:
            expected = cfg.k_iP * 1000.0 * (1.0 - math.exp(-eps * elapsed)) / eps
        assert state.x_P == pytest.approx(expected, rel=1e-9)


def test_proposed_step_approaches_droop_for_large_epsilon(cfg: ProposedConfig) -> None:
    setpoint = Setpoint(P_0=11000.0)
    state = _held_state(10000.0)
    for _ in range(2000):
        omega, _ = gfl_proposed_step(state, setpoint, 10000.0, 0.0, 200.0, 200.0, DT, cfg=cfg)
    droop_deviation = cfg.k_pP * 1000.0
    assert omega - setpoint.omega_0 == pytest.approx(
        droop_deviation + cfg.k_iP * 1000.0 / 200.0, rel=1e-6
    )


def test_proposed_step_rejects_epsilon_outside_range(cfg: ProposedConfig) -> None:
    with pytest.raises(ValueError, match="epsilon outside"):
        gfl_proposed_step(ProposedState(), Setpoint(), 0.0, 0.0, cfg.eps_max + 1.0, 0.0, DT, cfg=cfg)


def test_proposed_integrators_frozen_while_saturated(cfg: ProposedConfig) -> None:
    state = _held_state(10000.0)
    state.x_P = 0.3
    state.inner.saturated = True
    gfl_proposed_step(state, Setpoint(P_0=20000.0), 10000.0, 0.0, 0.0, 0.0, DT, cfg=cfg)
    assert state.x_P == 0.3


def test_current_control_anti_windup(params: PlantParams) -> None:
    state = InnerLoopState()
    m = current_control(
        DqPair(1e4, 0.0), DqPair(0.0, 0.0), DqPair(0.0, 0.0),
        InnerLoopConfig(), params, params.omega_0, state, DT,
    )
    assert state.saturated
    assert m.magnitude == pytest.approx(1.0)
    assert state.current_integral == DqPair(0.0, 0.0)


def test_current_control_feed_forward_only_at_zero_error(params: PlantParams) -> None:
    i_L, V_c = DqPair(10.0, -2.0), DqPair(391.0, 5.0)
    m = current_control(i_L, i_L, V_c, InnerLoopConfig(), params, params.omega_0, InnerLoopState(), DT)
    half_dc = 0.5 * params.V_dc
    assert m.d * half_dc == pytest.approx(V_c.d - params.L_i * params.omega_0 * i_L.q)
    assert m.q * half_dc == pytest.approx(V_c.q + params.L_i * params.omega_0 * i_L.d)


def test_voltage_control_feed_forward_only_at_zero_error(params: PlantParams) -> None:
    V_c, i_g = DqPair(391.0, 3.0), DqPair(17.0, -1.0)
    state = InnerLoopState()
    i_L_ref = voltage_control(V_c, V_c, i_g, InnerLoopConfig(), params, params.omega_0, state, DT)
    assert i_L_ref.d == pytest.approx(i_g.d - params.C_i * params.omega_0 * V_c.q)
    assert i_L_ref.q == pytest.approx(i_g.q + params.C_i * params.omega_0 * V_c.d)
    assert state.voltage_integral == DqPair(0.0, 0.0)


def test_conventional_step_setpoint_consistency(params: PlantParams) -> None:
    setpoint = Setpoint(P_0=10000.0, Q_0=2000.0)
    measurements = InverterState(i_L=DqPair(0.0, 0.0), V_c=DqPair(391.0, 0.0), i_g=DqPair(0.0, 0.0))
    i_L_ref, omega = gfl_conventional_step(
        ConventionalGflState(), setpoint, measurements, DT, pll_cfg=PllConfig(k_p=0.5, k_i=50.0), params=params,
    )
    assert omega == pytest.approx(setpoint.omega_0)
    i_g_ref = setpoint.grid_current_reference()
    assert 1.5 * setpoint.V_0 * i_g_ref.d == pytest.approx(setpoint.P_0)
    assert -1.5 * setpoint.V_0 * i_g_ref.q == pytest.approx(setpoint.Q_0)
    assert i_L_ref.d == pytest.approx(i_g_ref.d)
    assert i_L_ref.q == pytest.approx(i_g_ref.q + params.C_i * omega * 391.0)


def test_proposed_controller_follows_latest_schedule(params: PlantParams, cfg: ProposedConfig) -> None:
    schedules = (
        TransitionSchedule(direction="gfm_to_gfl", start_time=7.0, eps_max=200.0),
        TransitionSchedule(start_time=2.0, ramp_rate=100.0, eps_max=200.0),
    )
    controller = ProposedGflController(Setpoint(P_0=10000.0), params, InnerLoopConfig(), cfg, schedules)
    assert controller.epsilon(1.0) == 0.0
    assert controller.epsilon(3.0) == pytest.approx(100.0)
    assert controller.epsilon(5.0) == 200.0
    assert controller.epsilon(8.0) == 0.0


def test_proposed_controller_initialise_holds_seed_frequency(params: PlantParams, cfg: ProposedConfig) -> None:
    setpoint = Setpoint(P_0=10000.0)
    controller = ProposedGflController(setpoint, params, InnerLoopConfig(), cfg)
    x = InverterState(i_L=DqPair(17.0, 1.0), V_c=DqPair(391.0, 0.0), i_g=DqPair(16.0, 0.0))
    controller.initialise(x, omega=setpoint.omega_0 + 0.5)
    output = controller.control(x, 0.0, DT)
    assert output.omega == pytest.approx(setpoint.omega_0 + 0.5)
    assert output.eps_P == 0.0


def test_droop_controller_initialise_uses_measured_power(params: PlantParams) -> None:
    droop = ProposedConfig.from_ratios(20.0 * math.pi).as_droop()
    setpoint = Setpoint(P_0=10000.0)
    controller = GfmDroopController(setpoint, params, InnerLoopConfig(), droop)
    x = InverterState(i_L=DqPair(0.0, 0.0), V_c=DqPair(391.0, 0.0), i_g=DqPair(20.0, 0.0))
    controller.initialise(x)
    P, _ = power_from_dq(x.V_c, x.i_g)
    assert controller.droop_frequency() == pytest.approx(setpoint.omega_0 + droop.k_p * (10000.0 - P))


def test_pll_locks_after_grid_frequency_step() -> None:
    cfg = PllConfig(k_p=0.5, k_i=50.0)
    state = PllState()
    theta_grid = theta_pll = 0.0
    omega = state.omega
    for step in range(10000):
        omega_grid = 2.0 * math.pi * (60.0 if step * DT < 0.1 else 60.5)
        omega = pll_step(state, 391.0 * math.sin(theta_grid - theta_pll), DT, cfg)
        theta_grid += omega_grid * DT
        theta_pll += omega * DT
    assert omega == pytest.approx(2.0 * math.pi * 60.5, abs=1e-3)
    assert abs(math.sin(theta_grid - theta_pll)) < 1e-5


def test_current_loop_reaches_one_time_constant_point(params: PlantParams) -> None:
    cfg = InnerLoopConfig()
    dt = 1e-6
    V_c = DqPair(391.0, 0.0)
    state = InnerLoopState()
    i_d = i_q = 0.0
    half_dc = 0.5 * params.V_dc
    omega = params.omega_0
    for _ in range(int(round(cfg.tau_c / dt))):
        m = current_control(DqPair(2.0, 0.0), DqPair(i_d, i_q), V_c, cfg, params, omega, state, dt)
        d_i_d = (m.d * half_dc + omega * params.L_i * i_q - V_c.d - params.R_i * i_d) / params.L_i
        d_i_q = (m.q * half_dc - omega * params.L_i * i_d - V_c.q - params.R_i * i_q) / params.L_i
        i_d, i_q = i_d + d_i_d * dt, i_q + d_i_q * dt
    assert i_d == pytest.approx(2.0 * (1.0 - math.exp(-1.0)), rel=1e-2)
    assert abs(i_q) < 1e-3
    assert not state.saturated


def test_voltage_loop_step_matches_transfer_function(params: PlantParams) -> None:
    cfg = InnerLoopConfig()
    dt = 2e-8
    steps = 100000
    # exact zero-order-hold model of the non-rotating filter: x = (i_L, V_c), u = m·V_dc/2
    a = np.array([[-params.R_i / params.L_i, -1.0 / params.L_i], [1.0 / params.C_i, 0.0]])
    b = np.array([[1.0 / params.L_i], [0.0]])
    a_d, b_d, *_ = signal.cont2discrete((a, b, np.eye(2), np.zeros((2, 1))), dt, method="zoh")
    x = np.zeros(2)
    state = InnerLoopState()
    reference, no_load = DqPair(1.0, 0.0), DqPair(0.0, 0.0)
    voltages = np.empty(steps + 1)
    for k in range(steps + 1):
        voltages[k] = x[1]
        i_L, V_c = DqPair(float(x[0]), 0.0), DqPair(float(x[1]), 0.0)
        i_L_ref = voltage_control(reference, V_c, no_load, cfg, params, 0.0, state, dt)
        m = current_control(i_L_ref, i_L, V_c, cfg, params, 0.0, state, dt)
        x = a_d @ x + b_d[:, 0] * (m.d * 0.5 * params.V_dc)
    times = np.arange(steps + 1) * dt
    expected = voltage_loop_tf(params, cfg).step_response(times[::100])
    assert np.max(np.abs(voltages[::100] - expected)) < 1e-4
    assert voltage_loop_tf(params, cfg).dc_gain() == pytest.approx(1.0)


def test_controller_interface_is_abstract(params: PlantParams) -> None:
    with pytest.raises(TypeError, match="abstract"):
        Controller(Setpoint(), params, InnerLoopConfig())
