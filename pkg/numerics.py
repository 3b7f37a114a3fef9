"""Numeric kernels: fixed-step RK4, Lyapunov solves, eigenvalues and polynomial tests.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects; polynomials use :class:`numpy.polynomial.Polynomial`,
whose coefficients are stored in ascending degree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from logging_utils import get_logger

logger = get_logger(__name__)

Derivative = Callable[[float, np.ndarray], np.ndarray]

__all__ = [
    "ContractViolationError",
    "IntegrationDivergedError",
    "LyapunovNoSolutionError",
    "OdeSystem",
    "Polynomial",
    "Trajectory",
    "as_matrix",
    "is_hurwitz_matrix",
    "is_hurwitz_polynomial",
    "poly_roots",
    "rk4_integrate",
    "rk4_step",
    "routh_hurwitz_cubic",
    "solve_lyapunov",
    "sym_eigs",
]

SYMMETRY_TOLERANCE = 1e-12


class ContractViolationError(ValueError):
    """Raised when an input breaks a documented precondition."""


class IntegrationDivergedError(ArithmeticError):
    """Raised when a derivative evaluation returns non-finite values."""

    def __init__(self, time: float, message: str | None = None) -> None:
        self.time = time
        super().__init__(message or f"integration diverged at t={time:.9g}s")


class LyapunovNoSolutionError(ValueError):
    """Raised when the Lyapunov equation has no positive-definite solution."""


@dataclass(frozen=True)
class OdeSystem:
    """First-order system ``dx/dt = derivative(t, x)`` of fixed dimension."""

    dimension: int
    derivative: Derivative

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ContractViolationError("ODE dimension must be positive")


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution: ``states[k]`` is the state at ``times[k]``."""

    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def as_matrix(values: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Return a finite 2-D float array or raise ``ContractViolationError``."""

    matrix = np.asarray(values, dtype=float)
    if matrix.ndim != 2:
        raise ContractViolationError(f"expected a 2-D matrix, got ndim={matrix.ndim}")
    if not np.all(np.isfinite(matrix)):
        raise ContractViolationError("matrix entries must be finite")
    return matrix


def _checked_derivative(f: Derivative, t: float, x: np.ndarray) -> np.ndarray:
    dx = np.asarray(f(t, x), dtype=float)
    if dx.shape != x.shape:
        raise ContractViolationError(
            f"derivative shape {dx.shape} does not match state shape {x.shape}"
        )
    if not np.all(np.isfinite(dx)):
        logger.error("integration_diverged", extra={"time": t})
        raise IntegrationDivergedError(t)
    return dx


def rk4_step(f: Derivative, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """Advance ``x`` by one classical Runge-Kutta step of length ``h``."""

    k1 = _checked_derivative(f, t, x)
    k2 = _checked_derivative(f, t + 0.5 * h, x + 0.5 * h * k1)
    k3 = _checked_derivative(f, t + 0.5 * h, x + 0.5 * h * k2)
    k4 = _checked_derivative(f, t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(
    system: OdeSystem,
    x0: Sequence[float] | np.ndarray,
    t0: float,
    t1: float,
    dt: float,
) -> Trajectory:
    """Integrate ``system`` from ``t0`` to ``t1`` with a fixed step ``dt``.

    The trajectory is sampled after every step; the last step is shortened so
    the final sample lands exactly on ``t1``.
    """

    if not dt > 0:
        raise ContractViolationError("dt must be positive")
    if not t1 > t0:
        raise ContractViolationError("t1 must be greater than t0")
    x = np.array(x0, dtype=float).reshape(-1)
    if x.size != system.dimension:
        raise ContractViolationError(
            f"initial state has dimension {x.size}, system expects {system.dimension}"
        )

    full_steps = int(math.floor((t1 - t0) / dt + 1e-9))
    remainder = (t1 - t0) - full_steps * dt
    if remainder <= 1e-12 * max(1.0, abs(t1)):
        remainder = 0.0
    n_samples = full_steps + 1 + (1 if remainder > 0.0 else 0)

    times = np.empty(n_samples)
    states = np.empty((n_samples, system.dimension))
    times[0] = t0
    states[0] = x
    t = t0
    for k in range(1, full_steps + 1):
        x = rk4_step(system.derivative, t, x, dt)
        t = t0 + k * dt
        times[k] = t
        states[k] = x
    if remainder > 0.0:
        x = rk4_step(system.derivative, t, x, t1 - t)
        times[-1] = t1
        states[-1] = x
    else:
        times[-1] = t1
    return Trajectory(times=times, states=states)


def is_hurwitz_matrix(a: np.ndarray) -> bool:
    """True when every eigenvalue of ``a`` has a strictly negative real part."""

    return bool(np.all(np.linalg.eigvals(as_matrix(a)).real < 0.0))


def solve_lyapunov(a: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    """Solve ``AᵀW + WA = -Q`` (``Q = I`` by default) for symmetric ``W``.

    The equation is vectorised with Kronecker products and solved densely; the
    matrices handled here are at most a few states wide.
    """

    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise ContractViolationError(f"Lyapunov solve needs a square matrix, got {a.shape}")
    if not is_hurwitz_matrix(a):
        logger.warning(
            "lyapunov_not_hurwitz",
            extra={"max_real_part": float(np.max(np.linalg.eigvals(a).real))},
        )
        raise LyapunovNoSolutionError("matrix is not Hurwitz; no positive-definite solution")
    rhs = np.eye(n) if q is None else as_matrix(q)
    if rhs.shape != (n, n):
        raise ContractViolationError("right-hand side must match the matrix shape")

    identity = np.eye(n)
    # column-major vec: vec(AᵀW) = (I⊗Aᵀ)vec(W), vec(WA) = (Aᵀ⊗I)vec(W)
    operator = np.kron(identity, a.T) + np.kron(a.T, identity)
    solution = np.linalg.solve(operator, -rhs.reshape(-1, order="F"))
    w = solution.reshape((n, n), order="F")
    return 0.5 * (w + w.T)


def sym_eigs(w: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix."""

    w = as_matrix(w)
    if w.shape[0] != w.shape[1]:
        raise ContractViolationError("eigenvalues need a square matrix")
    scale = max(1.0, float(np.max(np.abs(w))))
    asymmetry = float(np.max(np.abs(w - w.T)))
    if asymmetry > SYMMETRY_TOLERANCE * scale:
        raise ContractViolationError(f"matrix is not symmetric (asymmetry {asymmetry:.3e})")
    return np.sort(np.linalg.eigvalsh(w))


def routh_hurwitz_cubic(a2: float, a1: float, a0: float) -> bool:
    """Routh-Hurwitz verdict for the monic cubic ``s³ + a2 s² + a1 s + a0``."""

    return a2 > 0.0 and a0 > 0.0 and a2 * a1 > a0


def is_hurwitz_polynomial(p: Polynomial) -> bool:
    """Routh-array test for a real polynomial of any degree.

    Degenerate arrays (a zero in the first column) are reported unstable: such
    polynomials have roots on or to the right of the imaginary axis.
    """

    coefficients = list(p.trim().coef[::-1])  # descending
    if len(coefficients) < 2:
        raise ContractViolationError("stability test needs a polynomial of degree >= 1")
    if coefficients[0] < 0:
        coefficients = [-c for c in coefficients]
    rows = [coefficients[0::2], coefficients[1::2]]
    width = len(rows[0])
    rows = [row + [0.0] * (width - len(row)) for row in rows]
    for _ in range(len(coefficients) - 2):
        upper, lower = rows[-2], rows[-1]
        if lower[0] == 0.0:
            return False
        nxt = [
            (lower[0] * upper[i + 1] - upper[0] * lower[i + 1]) / lower[0]
            for i in range(width - 1)
        ] + [0.0]
        rows.append(nxt)
    return all(row[0] > 0.0 for row in rows)


def poly_roots(p: Polynomial) -> np.ndarray:
    """All complex roots of ``p`` (companion-matrix eigenvalues)."""

    trimmed = p.trim()
    if trimmed.degree() < 1:
        raise ContractViolationError("roots need a polynomial of degree >= 1")
    return trimmed.roots().astype(complex)
