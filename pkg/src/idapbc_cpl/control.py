"""IDA-PBC duty law, its closed-loop energy function, gain synthesis and a PI baseline.

The closed-loop energy is

    H_d(x) = -C E x2 / (2L) - sqrt(C/(2L)) P atan(sqrt(2L) x1 / (sqrt(C) x2))
             - P E C artanh(sqrt(2L) x1 / sqrt(W)) / sqrt(2 L W)
             + k1/2 (z + k2)^2,      W = C x2^2 + 2 L x1^2,  z = W / (2C),

which solves the matching PDE for the interconnection matrix :func:`fd_matrix`
and the input matrix :func:`input_matrix`. The duty law is the projection
``u = (g^T g)^-1 g^T (F_d grad H_d - f)`` written out term by term.

The scalar kernels (leading underscore) are numba-compiled and shared with
the simulators; the public functions add validation and dataclass plumbing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import ConverterParams, Equilibrium, ModelDomainError, State, equilibrium_current

_jit = njit(cache=True, nogil=True)


class GainSynthesisError(RuntimeError):
    """Raised when gain synthesis fails to produce a certified gain set."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


# --------------------------------------------------------------------------
# scalar kernels


@_jit
def _atanh_arg(x1, x2, L, C):
    W = C * x2 * x2 + 2.0 * L * x1 * x1
    return math.sqrt(2.0 * L) * x1 / math.sqrt(W)


@_jit
def _hd(x1, x2, P, E, L, C, k1, k2):
    W = C * x2 * x2 + 2.0 * L * x1 * x1
    z = W / (2.0 * C)
    A = math.atanh(math.sqrt(2.0 * L) * x1 / math.sqrt(W))
    phi = math.atan(math.sqrt(2.0 * L) * x1 / (math.sqrt(C) * x2))
    return (-C * E * x2 / (2.0 * L)
            - math.sqrt(C / (2.0 * L)) * P * phi
            - P * E * C * A / math.sqrt(2.0 * L * W)
            + 0.5 * k1 * (z + k2) ** 2)


@_jit
def _grad(x1, x2, P, E, L, C, k1, k2):
    W = C * x2 * x2 + 2.0 * L * x1 * x1
    z = W / (2.0 * C)
    A = math.atanh(math.sqrt(2.0 * L) * x1 / math.sqrt(W))
    W32 = W * math.sqrt(W)
    s2L = math.sqrt(2.0 * L)
    phi1 = k1 * (z + k2)
    g1 = (s2L * C * E * P * x1 * A / W32
          - C * P * (E + x2) / W
          + 2.0 * L * x1 / C * phi1)
    g2 = (C * C * E * P * x2 * A / (s2L * W32)
          + C * E * P * x1 / (x2 * W)
          - C * E / (2.0 * L)
          + C * P * x1 / W
          + x2 * phi1)
    return g1, g2


@_jit
def _hess(x1, x2, P, E, L, C, k1, k2):
    W = C * x2 * x2 + 2.0 * L * x1 * x1
    z = W / (2.0 * C)
    A = math.atanh(math.sqrt(2.0 * L) * x1 / math.sqrt(W))
    W2 = W * W
    W32 = W * math.sqrt(W)
    W52 = W2 * math.sqrt(W)
    s2L = math.sqrt(2.0 * L)
    CEP = C * E * P
    h11 = (-3.0 * s2L * 2.0 * L * CEP * x1 * x1 * A / W52
           + s2L * CEP * A / W32
           + 6.0 * CEP * L * x1 / W2
           + 4.0 * C * L * P * x1 * x2 / W2
           + k1 * (2.0 * L / C) * (z + k2)
           + k1 * (2.0 * L * x1 / C) ** 2)
    h12 = (-3.0 * s2L * C * CEP * x1 * x2 * A / W52
           + 2.0 * C * CEP * x2 / W2
           - 2.0 * CEP * L * x1 * x1 / (W2 * x2)
           - 4.0 * C * L * P * x1 * x1 / W2
           + C * P / W
           + k1 * (2.0 * L * x1 / C) * x2)
    h22 = (-3.0 * C * C * CEP * x2 * x2 * A / (s2L * W52)
           + C * CEP * A / (s2L * W32)
           - 4.0 * C * CEP * x1 / W2
           - 2.0 * CEP * L * x1 ** 3 / (W2 * x2 * x2)
           + 4.0 * C * L * P * x1 ** 3 / (W2 * x2)
           - 2.0 * C * P * x1 / (x2 * W)
           + k1 * (z + k2)
           + k1 * x2 * x2)
    return h11, h12, h22


@_jit
def _k2(x1s, x2s, P, E, L, C, k1):
    Ws = C * x2s * x2s + 2.0 * L * x1s * x1s
    As = math.atanh(math.sqrt(2.0 * L) * x1s / math.sqrt(Ws))
    return ((-math.sqrt(2.0 * L * C ** 6 * Ws) * E * P * x1s * As
             - Ws * (C ** 3 * P * (-E - x2s)
                     + C * C * k1 * L * x1s * x2s ** 4
                     + 4.0 * C * k1 * L * L * x1s ** 3 * x2s * x2s
                     + 4.0 * k1 * L ** 3 * x1s ** 5))
            / (2.0 * C * k1 * L * x1s * Ws * Ws))


@_jit
def _duty_raw(x1, x2, P, E, L, C, k1, k2):
    vT = E + x2
    W = C * x2 * x2 + 2.0 * L * x1 * x1
    W2 = W * W
    A = math.atanh(math.sqrt(2.0 * L) * x1 / math.sqrt(W))
    root = math.sqrt(2.0 * L * C ** 6 * W)
    shaped = W + 2.0 * C * k2
    C2 = C * C
    L2 = L * L
    # first bracket: dH_d/dx1
    b1 = (root * E * P * x1 * A
          - C ** 3 * P * W * vT
          + k1 * L * x1 * W2 * shaped) / (C2 * W2)
    # second bracket, before its 1/(2 L C x2 W^2) prefactor
    b2 = (root * E * P * x2 * x2 * A
          + C2 * W * (2.0 * L * P * x1 * vT - E * x2 * W)
          + k1 * L * (x2 * W) ** 2 * shaped)
    c1 = 2.0 * x1 * x2 / (C2 * vT) + x2 * vT / (L2 * x1)
    c2 = 2.0 * L * E * x1 * x1 / (C ** 3 * vT * vT) - 2.0 * x2 / (L * C)
    inner = (x1 / C2 * (x1 - P / x2)
             + x2 * vT / L2
             - c1 * b1
             + c2 * b2 / (2.0 * L * C * x2 * W2))
    return inner / (x1 * x1 / C2 + vT * vT / L2)


@_jit
def _adaptive_duty_raw(x1, x2, P_hat, E, L, C, k1, x2s):
    x1s = P_hat * (1.0 / x2s + 1.0 / E)
    k2 = _k2(x1s, x2s, P_hat, E, L, C, k1)
    return _duty_raw(x1, x2, P_hat, E, L, C, k1, k2)


@_jit
def _k1_bounds(x1s, x2s, P, E, L, C, k2):
    Ws = C * x2s * x2s + 2.0 * L * x1s * x1s
    As = math.atanh(math.sqrt(2.0 * L) * x1s / math.sqrt(Ws))
    den1 = C * (2.0 * k2 + x2s * x2s) + 6.0 * L * x1s * x1s
    k1a = -(C ** 3 * P * (2.0 * math.sqrt(L) * x1s * (2.0 * x2s + 3.0 * E) * Ws
                          + math.sqrt(2.0 * C) * E * math.sqrt(Ws / C)
                          * (C * x2s * x2s - 4.0 * L * x1s * x1s) * As)
            / (math.sqrt(L) * Ws ** 3 * den1))
    Q = C * x2s ** 3 + E * C * x2s * x2s - 2.0 * E * L * x1s * x1s
    k1b = ((3.0 * math.sqrt(2.0 * L * C ** 5) * E * P * x1s * Q * As
            - math.sqrt(C ** 5 * Ws) * P
            * (2.0 * E * x2s * (C * x2s * x2s - 5.0 * L * x1s * x1s)
               + E * E * (C * x2s * x2s - 10.0 * L * x1s * x1s)
               + C * x2s ** 4 - 2.0 * L * x1s * x1s * x2s * x2s))
           / (2.0 * L * math.sqrt(Ws ** 5 / C) * x1s * Q))
    return k1a, k1b


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class ControllerGains:
    """Tuning gain ``k1``, offset ``k2`` and the operating point they were built for.

    The energy shaping term is ``k1/2 (z + k2)^2`` with ``z = W/(2C)``.
    """

    k1: float
    k2: float
    equilibrium: Equilibrium
    P_design: float

    def bounds(self, p: ConverterParams) -> tuple[float, float]:
        return k1_lower_bounds(self.equilibrium, self.P_design, self.k2, p)

    def validate(self, p: ConverterParams, rtol: float = 1e-10) -> None:
        """Raise :class:`GainSynthesisError` if the stored gains are not certified."""
        k2 = k2_gain(self.equilibrium, self.P_design, self.k1, p)
        if abs(k2 - self.k2) > rtol * abs(k2):
            raise GainSynthesisError(f"k2={self.k2} does not match the stationarity value {k2}")
        lo, hi = k1_interval(self.equilibrium, self.P_design, self.k2, p)
        if not lo < self.k1 < hi:
            raise GainSynthesisError(f"k1={self.k1} is outside the certified interval ({lo}, {hi})")


@dataclass(frozen=True)
class EnergyAux:
    """Switch-throw voltage ``v_T = E + x2`` and mixed energies ``W``, ``W*``."""

    v_T: float
    W: float
    W_star: float


@dataclass
class PiGains:
    """PI gains on the output-voltage error; ``integral_state`` is in V*s."""

    kp: float
    ki: float
    integral_state: float = 0.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ValueError("PI gains must be non-negative")

    @classmethod
    def bumpless(cls, kp: float, ki: float, u0: float) -> "PiGains":
        """Gains whose integral already holds the duty ``u0`` at zero error."""
        return cls(kp, ki, u0 / ki if ki > 0 else 0.0)


@dataclass(frozen=True)
class DutyCommand:
    u: float
    u_raw: float

    @property
    def saturated(self) -> bool:
        return self.u != self.u_raw


# --------------------------------------------------------------------------
# public functions


def _require_positive(s: State, what="state") -> None:
    if not (s.x1 > 0 and s.x2 > 0):
        raise ModelDomainError(f"{what} must lie in the open positive quadrant, got {s}")


def _require_x2(s: State) -> None:
    if not s.x2 > 0:
        raise ModelDomainError(f"energy function undefined at x2={s.x2!r}")


def energy_aux(s: State, eq: Equilibrium, p: ConverterParams) -> EnergyAux:
    W = p.C * s.x2 ** 2 + 2 * p.L * s.x1 ** 2
    W_star = p.C * eq.x2_star ** 2 + 2 * p.L * eq.x1_star ** 2
    return EnergyAux(p.E + s.x2, W, W_star)


def hd(s: State, P: float, g: ControllerGains, p: ConverterParams) -> float:
    """Closed-loop energy (Lyapunov function) at ``s``."""
    _require_x2(s)
    return _hd(s.x1, s.x2, P, p.E, p.L, p.C, g.k1, g.k2)


def grad_hd(s: State, P: float, g: ControllerGains, p: ConverterParams) -> np.ndarray:
    _require_x2(s)
    return np.array(_grad(s.x1, s.x2, P, p.E, p.L, p.C, g.k1, g.k2))


def hessian_hd(s: State, P: float, g: ControllerGains, p: ConverterParams) -> np.ndarray:
    _require_x2(s)
    h11, h12, h22 = _hess(s.x1, s.x2, P, p.E, p.L, p.C, g.k1, g.k2)
    return np.array([[h11, h12], [h12, h22]])


def k2_gain(eq: Equilibrium, P: float, k1: float, p: ConverterParams) -> float:
    """Offset ``k2`` that makes ``eq`` a stationary point of ``H_d``."""
    if k1 == 0:
        raise ModelDomainError("k2 is undefined for k1 = 0")
    return _k2(eq.x1_star, eq.x2_star, P, p.E, p.L, p.C, k1)


def k1_lower_bounds(eq: Equilibrium, P: float, k2: float,
                    p: ConverterParams) -> tuple[float, float]:
    """Return ``(k1', k1'')``; the Hessian at ``eq`` is positive definite for ``k1 > max``.

    ``k1'`` is the root of the leading Hessian entry with ``k2`` held fixed,
    ``k1''`` the root of the Hessian determinant once ``k2`` is eliminated.
    """
    d1, d2 = _bound_denominators(eq, k2, p)
    if d1 == 0:
        raise ModelDomainError("k1' undefined: C(2 k2 + x2*^2) + 6 L x1*^2 = 0")
    if d2 == 0:
        raise ModelDomainError("k1'' undefined: C x2*^3 + E C x2*^2 - 2 E L x1*^2 = 0")
    return _k1_bounds(eq.x1_star, eq.x2_star, P, p.E, p.L, p.C, k2)


def _bound_denominators(eq: Equilibrium, k2: float, p: ConverterParams) -> tuple[float, float]:
    x1s, x2s = eq.x1_star, eq.x2_star
    return (p.C * (2 * k2 + x2s ** 2) + 6 * p.L * x1s ** 2,
            p.C * x2s ** 3 + p.E * p.C * x2s ** 2 - 2 * p.E * p.L * x1s ** 2)


def k1_interval(eq: Equilibrium, P: float, k2: float,
                p: ConverterParams) -> tuple[float, float]:
    """Open interval of ``k1`` for which the Hessian conditions hold at fixed ``k2``.

    Each of ``k1'``, ``k1''`` is the root of a quantity that is linear in
    ``k1`` with slope proportional to the corresponding denominator, so a
    root is a lower bound when its denominator is positive and an upper
    bound when it is negative. Returns ``(lower, upper)``; ``upper`` is
    ``inf`` in the usual case of two positive denominators, and then
    ``lower == max(k1', k1'')``.
    """
    lo, hi = -math.inf, math.inf
    for b, d in zip(k1_lower_bounds(eq, P, k2, p), _bound_denominators(eq, k2, p)):
        if d > 0:
            lo = max(lo, b)
        else:
            hi = min(hi, b)
    return lo, hi


def hessian_at_equilibrium(eq: Equilibrium, P: float, k1: float,
                           p: ConverterParams) -> np.ndarray:
    """Hessian of ``H_d`` at ``eq`` with ``k2`` chosen for stationarity."""
    k2 = k2_gain(eq, P, k1, p)
    h11, h12, h22 = _hess(eq.x1_star, eq.x2_star, P, p.E, p.L, p.C, k1, k2)
    return np.array([[h11, h12], [h12, h22]])


def is_certified(eq: Equilibrium, P: float, k1: float, p: ConverterParams) -> bool:
    return bool(np.linalg.eigvalsh(hessian_at_equilibrium(eq, P, k1, p)).min() > 0)


def synthesize_gains(eq: Equilibrium, P: float, p: ConverterParams,
                     k1_seed: float = 0.01, safety_margin: float = 1.0,
                     max_iter: int = 100) -> ControllerGains:
    """Pick ``(k1, k2)`` for ``eq`` by fixed-point iteration on the k1 bounds.

    ``k2`` needs ``k1`` and the bounds need ``k2``; ``k1`` is raised to
    ``1.01 * margin`` times the lower end of :func:`k1_interval` until it
    clears it. The result is
    certified by a positive-definite Hessian at ``eq``.
    """
    if not k1_seed > 0:
        raise ValueError("k1_seed must be positive")
    if safety_margin < 1:
        raise ValueError("safety_margin must be >= 1")
    eq.check(P, p.E, rtol=1e-9)
    k1 = k1_seed
    trace = []
    for _ in range(max_iter):
        k2 = k2_gain(eq, P, k1, p)
        b, hi = k1_interval(eq, P, k2, p)
        trace.append((k1, k2, b))
        if k1 >= hi:
            raise GainSynthesisError(f"k1={k1} exceeds the upper bound {hi} implied by k2={k2}", trace)
        if k1 > b * safety_margin:
            break
        k1 = b * safety_margin * 1.01
    else:
        raise GainSynthesisError(f"no certified k1 after {max_iter} iterations", trace)
    if not is_certified(eq, P, k1, p):
        raise GainSynthesisError("Hessian at the equilibrium is not positive definite", trace)
    return ControllerGains(k1=k1, k2=k2, equilibrium=eq, P_design=P)


def gains_for(x2_star: float, P: float, p: ConverterParams, k1: float,
              safety_margin: float = 1.0) -> ControllerGains:
    """Synthesize gains for the operating point ``(x2*, P)`` starting from ``k1``."""
    eq = Equilibrium.from_voltage(x2_star, P, p.E)
    return synthesize_gains(eq, P, p, k1_seed=k1, safety_margin=safety_margin)


def ida_pbc_duty(s: State, P_hat: float, g: ControllerGains, p: ConverterParams,
                 adapt_k2: bool = True) -> DutyCommand:
    """Duty ratio of the IDA-PBC law with the load power replaced by ``P_hat``.

    With ``adapt_k2`` the target current ``x1*`` and the offset ``k2`` are
    recomputed from ``P_hat`` (certainty equivalence), so the target voltage
    ``g.equilibrium.x2_star`` is held for any load. Otherwise the stored
    ``g.k2`` is used as is.
    """
    _require_positive(s)
    if not P_hat > 0:
        raise ModelDomainError(f"P_hat must be positive, got {P_hat!r}")
    if adapt_k2:
        raw = _adaptive_duty_raw(s.x1, s.x2, P_hat, p.E, p.L, p.C, g.k1, g.equilibrium.x2_star)
    else:
        raw = _duty_raw(s.x1, s.x2, P_hat, p.E, p.L, p.C, g.k1, g.k2)
    return DutyCommand(min(max(raw, 0.0), 1.0), raw)


def fd_matrix(s: State, p: ConverterParams) -> np.ndarray:
    """Target interconnection/damping matrix ``F_d(x)``."""
    if s.x1 == 0:
        raise ModelDomainError("F_d is undefined at x1 = 0")
    x1, x2 = s.x1, s.x2
    vT = p.E + x2
    off = 2 * x2 / (p.C * vT)
    return np.array([[-x2 / (p.L * x1), -off],
                     [off, -2 * p.L * p.E * x1 / (p.C ** 2 * vT ** 2)]])


def input_matrix(s: State, p: ConverterParams) -> np.ndarray:
    """Input vector ``g(x) = [C (x2 + E), -L x1]``."""
    return np.array([p.C * (s.x2 + p.E), -p.L * s.x1])


def annihilator(s: State, p: ConverterParams) -> np.ndarray:
    """Left annihilator ``g_perp(x) = [L x1, C (x2 + E)]`` of :func:`input_matrix`."""
    return np.array([p.L * s.x1, p.C * (s.x2 + p.E)])


def drift(s: State, P: float, p: ConverterParams) -> np.ndarray:
    """Unforced vector field ``f(x) = [-x2/L, x1/C - P/(C x2)]``."""
    return np.array([-s.x2 / p.L, s.x1 / p.C - P / (p.C * s.x2)])


def closed_loop_field(s: State, P: float, g: ControllerGains, p: ConverterParams) -> np.ndarray:
    """Target closed-loop vector field ``F_d(x) grad H_d(x)``."""
    return fd_matrix(s, p) @ grad_hd(s, P, g, p)


def pi_duty(x2: float, x2_star: float, g: PiGains, dt: float) -> float:
    """One PI update on the output-voltage error; mutates ``g.integral_state``.

    Conditional integration: while the output is clamped the integral is
    frozen unless the error drives it back toward the linear range.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    e = x2_star - x2
    trial = g.integral_state + e * dt
    raw = g.kp * e + g.ki * trial
    if 0.0 <= raw <= 1.0 or (raw > 1.0 and e < 0) or (raw < 0.0 and e > 0):
        g.integral_state = trial
    else:
        raw = g.kp * e + g.ki * g.integral_state
    return min(max(raw, 0.0), 1.0)
