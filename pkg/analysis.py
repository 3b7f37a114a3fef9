"""Frequency-domain and stability analysis of the power loops.

Transfer functions are ratios of :class:`numpy.polynomial.Polynomial`
objects in ``s`` (ascending coefficients). The power-flow plant is the
small-angle, inductive linearization: ``P ≈ (V_0²/Z̄_g)·δ`` and
``Q ≈ (V_0/Z̄_g)·(V̄_c − V̄_g)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import signal

from control import ControlSection, InnerLoopConfig, ProposedConfig, PllConfig, TransitionSchedule, epsilon_at
from logging_utils import get_logger
from numerics import (
    ContractViolationError,
    LyapunovNoSolutionError,
    OdeSystem,
    Polynomial,
    Trajectory,
    is_hurwitz_matrix,
    is_hurwitz_polynomial,
    poly_roots,
    rk4_integrate,
    solve_lyapunov,
    sym_eigs,
)
from plant import PlantParams

logger = get_logger(__name__)

Channel = Literal["active", "reactive"]

S = Polynomial([0.0, 1.0])

# largest exponent math.exp represents, with headroom for the Rayleigh factor
MAX_LOG_BOUND = 700.0


class CertificateUnavailableError(ValueError):
    """Raised when ``A(ε)`` is not Hurwitz somewhere on the certificate grid."""

    def __init__(self, epsilon: float) -> None:
        self.epsilon = epsilon
        super().__init__(f"state matrix is not Hurwitz at epsilon={epsilon:.6g}")


@dataclass(frozen=True)
class TransferFunction:
    numerator: Polynomial
    denominator: Polynomial

    def __post_init__(self) -> None:
        if not np.any(self.denominator.coef != 0.0):
            raise ContractViolationError("transfer function denominator is zero")
        if not self.is_proper:
            logger.warning(
                "transfer_function_improper",
                extra={
                    "numerator_degree": self.numerator.trim().degree(),
                    "denominator_degree": self.denominator.trim().degree(),
                },
            )

    @classmethod
    def from_coefficients(cls, numerator: Sequence[float], denominator: Sequence[float]) -> "TransferFunction":
        """Build from ascending coefficient lists."""

        return cls(Polynomial(numerator), Polynomial(denominator))

    @property
    def is_proper(self) -> bool:
        return self.numerator.trim().degree() <= self.denominator.trim().degree()

    def evaluate(self, s: complex | np.ndarray) -> complex | np.ndarray:
        return self.numerator(s) / self.denominator(s)

    def freq_response(self, omegas: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluate(1j * np.asarray(omegas, dtype=float)))

    def magnitude(self, omegas: np.ndarray) -> np.ndarray:
        return np.abs(self.freq_response(omegas))

    def dc_gain(self) -> float:
        """Value at ``s = 0``; infinite when the denominator has a root at the origin."""

        den = float(self.denominator(0.0))
        num = float(self.numerator(0.0))
        if den == 0.0:
            return math.inf if num != 0.0 else math.nan
        return num / den

    def poles(self) -> np.ndarray:
        return poly_roots(self.denominator)

    def zeros(self) -> np.ndarray:
        if self.numerator.trim().degree() < 1:
            return np.empty(0, dtype=complex)
        return poly_roots(self.numerator)

    def is_stable(self) -> bool:
        return is_hurwitz_polynomial(self.denominator)

    def normalized(self) -> "TransferFunction":
        """Same function with a monic denominator."""

        lead = self.denominator.trim().coef[-1]
        return TransferFunction(self.numerator / lead, self.denominator / lead)

    def __mul__(self, other: "TransferFunction") -> "TransferFunction":
        return TransferFunction(self.numerator * other.numerator, self.denominator * other.denominator)

    def step_response(self, times: np.ndarray) -> np.ndarray:
        """Unit-step response on ``times`` (starting at zero)."""

        system = signal.lti(self.numerator.trim().coef[::-1], self.denominator.trim().coef[::-1])
        _, response = signal.step(system, T=np.asarray(times, dtype=float))
        return np.asarray(response)


def frequency_grid(low: float = 1e-2, high: float = 1e3, per_decade: int = 50) -> np.ndarray:
    """Log-spaced angular frequencies, ``per_decade`` points per decade."""

    if not (0.0 < low < high) or per_decade < 1:
        raise ContractViolationError("frequency grid needs 0 < low < high and per_decade >= 1")
    decades = math.log10(high / low)
    return np.logspace(math.log10(low), math.log10(high), int(round(decades * per_decade)) + 1)


# ---------------------------------------------------------------------------
# controller and closed-loop transfer functions


def _gains(cfg: ProposedConfig, channel: Channel) -> Tuple[float, float]:
    if channel == "active":
        return cfg.k_pP, cfg.k_iP
    return cfg.k_pQ, cfg.k_iQ


def power_controller_tf(cfg: ProposedConfig, eps: float, channel: Channel = "active") -> TransferFunction:
    """``K(s) = ω_lpf·(k_p·s + k_p·ε + k_i) / ((s + ε)(s + ω_lpf))``."""

    if eps < 0.0:
        raise ContractViolationError("epsilon must be non-negative")
    k_p, k_i = _gains(cfg, channel)
    w = cfg.omega_lpf
    numerator = w * Polynomial([k_p * eps + k_i, k_p])
    denominator = Polynomial([eps, 1.0]) * Polynomial([w, 1.0])
    return TransferFunction(numerator, denominator)


def droop_controller_tf(cfg: ProposedConfig, channel: Channel = "active") -> TransferFunction:
    """``k_p·ω_lpf / (s + ω_lpf)``."""

    k_p, _ = _gains(cfg, channel)
    return TransferFunction(Polynomial([k_p * cfg.omega_lpf]), Polynomial([cfg.omega_lpf, 1.0]))


def active_power_cltf(
    params: PlantParams, cfg: ProposedConfig, eps: float
) -> Tuple[TransferFunction, TransferFunction]:
    """Reference and frequency-disturbance responses of the injected active power."""

    controller = power_controller_tf(cfg, eps, "active")
    v0_sq = params.V_0 ** 2
    denominator = S * params.Z_g * controller.denominator + v0_sq * controller.numerator
    reference = TransferFunction(v0_sq * controller.numerator, denominator)
    disturbance = TransferFunction(v0_sq * controller.denominator, denominator)
    return reference, disturbance


def reactive_power_cltf(
    params: PlantParams, cfg: ProposedConfig, eps: float
) -> Tuple[TransferFunction, TransferFunction]:
    """Reference and voltage-disturbance responses of the injected reactive power."""

    controller = power_controller_tf(cfg, eps, "reactive")
    denominator = params.Z_g * controller.denominator + params.V_0 * controller.numerator
    reference = TransferFunction(params.V_0 * controller.numerator, denominator)
    disturbance = TransferFunction(params.V_0 * controller.denominator, denominator)
    return reference, disturbance


def droop_power_cltf(params: PlantParams, cfg: ProposedConfig) -> TransferFunction:
    """Active-power reference response with the pure droop controller."""

    controller = droop_controller_tf(cfg, "active")
    v0_sq = params.V_0 ** 2
    denominator = S * params.Z_g * controller.denominator + v0_sq * controller.numerator
    return TransferFunction(v0_sq * controller.numerator, denominator)


def current_loop_tf(inner: InnerLoopConfig) -> TransferFunction:
    """``T_c = 1/(τ_c s + 1)``; the PI zero cancels the filter-inductor pole."""

    return TransferFunction(Polynomial([1.0]), Polynomial([1.0, inner.tau_c]))


def voltage_loop_tf(params: PlantParams, inner: InnerLoopConfig) -> TransferFunction:
    """``T_v = K_v T_c G_v / (1 + K_v T_c G_v)`` with ``G_v = 1/(C_i s)``."""

    numerator = Polynomial([inner.k_iV, inner.k_pV])
    denominator = Polynomial([inner.k_iV, inner.k_pV, params.C_i, params.C_i * inner.tau_c])
    return TransferFunction(numerator, denominator)


def char_poly_active(params: PlantParams, cfg: ProposedConfig, eps: float) -> Polynomial:
    """``s³ + (ω+ε)s² + (ωε + gω·k_pP)s + gω(k_pP·ε + k_iP)`` with ``g = V_0²/Z̄_g``."""

    g = params.V_0 ** 2 / params.Z_g
    w = cfg.omega_lpf
    return Polynomial(
        [
            g * w * (cfg.k_pP * eps + cfg.k_iP),
            w * eps + g * w * cfg.k_pP,
            w + eps,
            1.0,
        ]
    )


def char_poly_reactive(params: PlantParams, cfg: ProposedConfig, eps: float) -> Polynomial:
    """``s² + (ω+ε+hω·k_pQ)s + ωε + hω(k_pQ·ε + k_iQ)`` with ``h = V_0/Z̄_g``."""

    h = params.V_0 / params.Z_g
    w = cfg.omega_lpf
    return Polynomial(
        [
            w * eps + h * w * (cfg.k_pQ * eps + cfg.k_iQ),
            w + eps + h * w * cfg.k_pQ,
            1.0,
        ]
    )


def char_poly(params: PlantParams, cfg: ProposedConfig, eps: float, channel: Channel = "active") -> Polynomial:
    if channel == "active":
        return char_poly_active(params, cfg, eps)
    return char_poly_reactive(params, cfg, eps)


def _companion(poly: Polynomial) -> np.ndarray:
    coefficients = poly.coef
    n = len(coefficients) - 1
    matrix = np.zeros((n, n))
    matrix[:-1, 1:] = np.eye(n - 1)
    matrix[-1, :] = -coefficients[:-1]
    return matrix


def realization_scale(params: PlantParams, cfg: ProposedConfig, channel: Channel = "active") -> float:
    """Frequency ``ρ`` that balances the companion realization of the loop.

    ``ρ`` is the geometric mean root magnitude at ``ε = 0``. It does not depend
    on ε, so the scaled ``A(ε)`` stays affine in ε.
    """

    poly = char_poly(params, cfg, 0.0, channel)
    return float(poly.coef[0]) ** (1.0 / (len(poly.coef) - 1))


def state_matrix(
    params: PlantParams, cfg: ProposedConfig, eps: float, channel: Channel = "active"
) -> Tuple[np.ndarray, np.ndarray]:
    """Realization ``A(ε)`` of the loop and ``B`` with ``A(ε) = A(0) + εB``.

    States are the output and its derivatives, the ``k``-th divided by
    ``ρᵏ`` (see :func:`realization_scale`); unscaled companion coordinates
    leave ``W(ε)`` too ill-conditioned for the certificate.
    """

    if eps < 0.0:
        raise ContractViolationError("epsilon must be non-negative")
    a = _companion(char_poly(params, cfg, eps, channel))
    w = cfg.omega_lpf
    if channel == "active":
        slope = np.array([params.V_0 ** 2 / params.Z_g * w * cfg.k_pP, w, 1.0])
    else:
        slope = np.array([w + params.V_0 / params.Z_g * w * cfg.k_pQ, 1.0])
    b = np.zeros_like(a)
    b[-1, :] = -slope
    powers = realization_scale(params, cfg, channel) ** np.arange(a.shape[0], dtype=float)
    similarity = np.outer(1.0 / powers, powers)
    return a * similarity, b * similarity


def stability_margin(cfg: ProposedConfig, channel: Channel = "active") -> float:
    """``ω_lpf − k_i/k_p``; non-negative for every valid configuration."""

    k_p, k_i = _gains(cfg, channel)
    return cfg.omega_lpf - k_i / k_p


# ---------------------------------------------------------------------------
# transition certificate


@dataclass(frozen=True)
class CertificatePoint:
    epsilon: float
    lambda_min: float
    lambda_max: float
    dW_norm: float


@dataclass(frozen=True)
class TransitionCertificate:
    """Gronwall-type bound on the Lyapunov growth over one ε transition.

    ``alpha_bound`` uses the worst rate over the whole interval times
    ``eps_max``. The ``*_pointwise`` fields integrate the rate along ε instead;
    they are never larger and stay representable for long transitions. Both
    bounds are also kept as logarithms, and an exponential beyond
    ``MAX_LOG_BOUND`` is reported as ``inf``.
    """

    channel: str
    eps_max: float
    log_alpha: float
    alpha_bound: float
    state_norm_gain: float
    dwell_time: float
    points: Tuple[CertificatePoint, ...]
    log_alpha_pointwise: float = 0.0
    alpha_pointwise: float = 1.0
    state_norm_gain_pointwise: float = 1.0

    @property
    def lambda_min(self) -> float:
        return min(point.lambda_min for point in self.points)

    @property
    def lambda_max(self) -> float:
        return max(point.lambda_max for point in self.points)

    @property
    def max_dW_norm(self) -> float:
        return max(point.dW_norm for point in self.points)


def lyapunov_matrix(params: PlantParams, cfg: ProposedConfig, eps: float, channel: Channel = "active") -> np.ndarray:
    """``W(ε)`` solving ``A(ε)ᵀW + WA(ε) = −I``."""

    a, _ = state_matrix(params, cfg, eps, channel)
    try:
        return solve_lyapunov(a)
    except LyapunovNoSolutionError as exc:
        raise CertificateUnavailableError(eps) from exc


def epsilon_sensitivity(
    params: PlantParams, cfg: ProposedConfig, eps: float, channel: Channel = "active"
) -> np.ndarray:
    """Exact ``∂W/∂ε`` from the differentiated Lyapunov equation."""

    a, b = state_matrix(params, cfg, eps, channel)
    w = lyapunov_matrix(params, cfg, eps, channel)
    return solve_lyapunov(a, b.T @ w + w @ b)


def transition_certificate(
    params: PlantParams,
    cfg: ProposedConfig,
    schedule: TransitionSchedule | None = None,
    *,
    channel: Channel = "active",
    grid_points: int = 41,
) -> TransitionCertificate:
    """Certify a monotone ε transition between 0 and ``eps_max``.

    ``∂W/∂ε`` is a finite difference with step ``eps_max/1000``, central in the
    interior and one-sided at the ends of the interval.
    """

    eps_max = schedule.eps_max if schedule is not None else cfg.eps_max
    if eps_max > cfg.eps_max:
        logger.warning("certificate_eps_max_out_of_range", extra={"requested": eps_max, "limit": cfg.eps_max})
        raise ContractViolationError(f"schedule eps_max {eps_max} exceeds controller limit {cfg.eps_max}")
    if grid_points < 2:
        raise ContractViolationError("certificate grid needs at least two points")

    grid = np.linspace(0.0, eps_max, grid_points) if eps_max > 0.0 else np.zeros(1)
    for eps in grid:
        a, _ = state_matrix(params, cfg, float(eps), channel)
        if not is_hurwitz_matrix(a):
            logger.error("certificate_unavailable", extra={"epsilon": float(eps), "channel": channel})
            raise CertificateUnavailableError(float(eps))

    step = eps_max / 1000.0

    def w_at(eps: float) -> np.ndarray:
        return lyapunov_matrix(params, cfg, eps, channel)

    points: List[CertificatePoint] = []
    for eps in map(float, grid):
        w = w_at(eps)
        eigenvalues = sym_eigs(w)
        if eigenvalues[0] <= 0.0:
            raise CertificateUnavailableError(eps)
        if eps_max == 0.0:
            derivative = np.zeros_like(w)
        else:
            lower = max(0.0, eps - step)
            upper = min(eps_max, eps + step)
            derivative = (w_at(upper) - w_at(lower)) / (upper - lower)
        points.append(
            CertificatePoint(
                epsilon=eps,
                lambda_min=float(eigenvalues[0]),
                lambda_max=float(eigenvalues[-1]),
                dW_norm=float(np.linalg.norm(derivative, 2)),
            )
        )

    lam_min = min(point.lambda_min for point in points)
    lam_max = max(point.lambda_max for point in points)
    growth = max(point.dW_norm for point in points) / lam_min
    log_alpha = growth * eps_max
    # q(ε) = ‖∂W/∂ε‖/λ̲(W(ε)) integrated cell by cell with the larger endpoint
    rates = np.array([point.dW_norm / point.lambda_min for point in points])
    cells = np.diff(np.array([point.epsilon for point in points]))
    log_alpha_pointwise = float(np.sum(np.maximum(rates[:-1], rates[1:]) * cells))
    alpha = _bounded_exp(log_alpha, channel)
    alpha_pointwise = _bounded_exp(log_alpha_pointwise, channel)
    certificate = TransitionCertificate(
        channel=channel,
        eps_max=eps_max,
        log_alpha=log_alpha,
        alpha_bound=alpha,
        state_norm_gain=alpha * lam_max / lam_min,
        dwell_time=lam_max * growth * eps_max,
        points=tuple(points),
        log_alpha_pointwise=log_alpha_pointwise,
        alpha_pointwise=alpha_pointwise,
        state_norm_gain_pointwise=alpha_pointwise * lam_max / lam_min,
    )
    logger.info(
        "certificate_computed",
        extra={
            "channel": channel,
            "eps_max": eps_max,
            "log_alpha": log_alpha,
            "log_alpha_pointwise": log_alpha_pointwise,
            "dwell_time": certificate.dwell_time,
        },
    )
    return certificate


def _bounded_exp(log_value: float, channel: str) -> float:
    if log_value > MAX_LOG_BOUND:
        # the logarithm is still a valid bound; only its exponential is unrepresentable
        logger.warning("certificate_bound_overflow", extra={"channel": channel, "log_bound": log_value})
        return math.inf
    return math.exp(log_value)


def simulate_transition_states(
    params: PlantParams,
    cfg: ProposedConfig,
    schedule: TransitionSchedule,
    x0: Sequence[float],
    *,
    channel: Channel = "active",
    t_end: float | None = None,
    dt: float = 1e-4,
) -> Trajectory:
    """Unforced ``ẋ = A(ε(t))x`` with ε following ``schedule``."""

    a0, b = state_matrix(params, cfg, 0.0, channel)
    end = t_end if t_end is not None else schedule.start_time + schedule.duration + 0.5

    def derivative(t: float, x: np.ndarray) -> np.ndarray:
        return (a0 + epsilon_at(t, schedule) * b) @ x

    return rk4_integrate(OdeSystem(a0.shape[0], derivative), x0, 0.0, end, dt)


# ---------------------------------------------------------------------------
# disturbance sensitivity


def conventional_gfl_sensitivity(
    params: PlantParams, pll: PllConfig
) -> Tuple[TransferFunction, TransferFunction]:
    """Power mismatch to capacitor voltage and to frame frequency for a PLL-based GFL.

    ``V̄_c = 2/(3V_0C_i s)·(P_0 − P)``, ``ω = ω_0 − 2K_PLL(s)/(3V_0C_i s)·(Q_0 − Q)``.
    """

    gain = 2.0 / (3.0 * params.V_0 * params.C_i)
    voltage = TransferFunction(Polynomial([gain]), Polynomial([0.0, 1.0]))
    frequency = TransferFunction(-gain * Polynomial([pll.k_i, pll.k_p]), Polynomial([0.0, 0.0, 1.0]))
    return voltage, frequency


def proposed_sensitivity(cfg: ProposedConfig, eps: float) -> Tuple[TransferFunction, TransferFunction]:
    """Power mismatch to voltage reference (``K_Q``) and to frequency (``K_P``)."""

    return power_controller_tf(cfg, eps, "reactive"), power_controller_tf(cfg, eps, "active")


def mode_equivalence_mismatch(
    cfg: ProposedConfig, eps: float | None = None, omegas: np.ndarray | None = None, channel: Channel = "active"
) -> float:
    """Largest relative gap between ``K(ε)`` and the pure droop for ``ω ≥ ω_lpf``."""

    eps = cfg.eps_max if eps is None else eps
    grid = frequency_grid() if omegas is None else np.asarray(omegas, dtype=float)
    grid = grid[grid >= cfg.omega_lpf]
    proposed = power_controller_tf(cfg, eps, channel).freq_response(grid)
    droop = droop_controller_tf(cfg, channel).freq_response(grid)
    return float(np.max(np.abs(proposed - droop) / np.abs(droop)))


# ---------------------------------------------------------------------------
# virtual synchronous generator


class VsgParams(BaseModel):
    """Swing-equation emulation ``J dω/dt = T_in − T_out − Dω`` with governor gain ``k_ω``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    J: float = Field(30000.0, gt=0.0, description="kg m^2")
    D: float = Field(1000.0, gt=0.0, description="N m s")
    k_omega: float = Field(4000.0, gt=0.0, description="N m s")
    omega_0: float = Field(2.0 * math.pi * 60.0, gt=0.0)

    @property
    def H(self) -> float:
        return self.J / self.omega_0


@dataclass(frozen=True)
class VsgEquivalence:
    vsg: TransferFunction
    droop_h: TransferFunction
    droop_j: TransferFunction
    mismatch_h: float
    mismatch_j: float
    omegas: np.ndarray


def vsg_tf(vsg: VsgParams) -> TransferFunction:
    """``(1/H) / (s + (k_ω + D)/H)``."""

    return TransferFunction(
        Polynomial([1.0 / vsg.H]),
        Polynomial([(vsg.k_omega + vsg.D) / vsg.H, 1.0]),
    )


def _relative_mismatch(a: TransferFunction, b: TransferFunction, omegas: np.ndarray) -> float:
    ra, rb = a.freq_response(omegas), b.freq_response(omegas)
    return float(np.max(np.abs(np.abs(ra) - np.abs(rb)) / np.abs(ra)))


def vsg_equivalence(vsg: VsgParams, omegas: np.ndarray | None = None) -> VsgEquivalence:
    """Compare the VSG frequency response with the droop it maps to.

    The mapping ``k_p = 1/(k_ω + D)`` is paired with ``ω_lpf = (k_ω + D)/H``
    and with ``ω_lpf = (k_ω + D)/J``; only the first reproduces the VSG.
    """

    grid = frequency_grid() if omegas is None else np.asarray(omegas, dtype=float)
    damping = vsg.k_omega + vsg.D
    k_p = 1.0 / damping

    def droop(omega_lpf: float) -> TransferFunction:
        return TransferFunction(Polynomial([k_p * omega_lpf]), Polynomial([omega_lpf, 1.0]))

    reference = vsg_tf(vsg)
    droop_h = droop(damping / vsg.H)
    droop_j = droop(damping / vsg.J)
    result = VsgEquivalence(
        vsg=reference,
        droop_h=droop_h,
        droop_j=droop_j,
        mismatch_h=_relative_mismatch(reference, droop_h, grid),
        mismatch_j=_relative_mismatch(reference, droop_j, grid),
        omegas=grid,
    )
    logger.info(
        "vsg_equivalence_computed",
        extra={"mismatch_h": result.mismatch_h, "mismatch_j": result.mismatch_j},
    )
    return result


# ---------------------------------------------------------------------------
# analysis documents


class AnalysisConfig(BaseModel):
    """Parameter set driven by ``analyze`` and ``certify``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    plant: PlantParams = PlantParams()
    control: ControlSection = ControlSection()
    epsilon: float = Field(0.0, ge=0.0)
    schedule: TransitionSchedule = TransitionSchedule()
    vsg: VsgParams = VsgParams()
    grid_points: int = Field(41, ge=2)
    sensitivity_frequency: float | None = Field(None, gt=0.0)

    def proposed(self) -> ProposedConfig:
        return self.control.proposed()

