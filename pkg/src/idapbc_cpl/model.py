"""Averaged and switched models of a buck-boost converter feeding an ideal CPL.

All quantities are SI. The load is the ideal constant power load ``i = P / x2``,
which is only meaningful above :data:`X2_FLOOR`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

#: Output voltage below which the ideal CPL model is considered invalid [V].
X2_FLOOR = 0.1


class ModelDomainError(ValueError):
    """Raised when a model function is evaluated outside its domain."""


@dataclass(frozen=True)
class ConverterParams:
    """Circuit constants: inductance ``L`` [H], capacitance ``C`` [F], input ``E`` [V]."""

    L: float
    C: float
    E: float

    def __post_init__(self):
        for name in ("L", "C", "E"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ModelDomainError(f"{name} must be positive, got {v!r}")

    def with_E(self, E: float) -> "ConverterParams":
        return ConverterParams(self.L, self.C, E)


@dataclass(frozen=True)
class State:
    """Plant state: inductor current ``x1`` [A] and output voltage ``x2`` [V]."""

    x1: float
    x2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2])

    @property
    def is_positive(self) -> bool:
        return self.x1 > 0 and self.x2 > 0


@dataclass(frozen=True)
class Equilibrium:
    """A point of the assignable equilibrium set for a given load power.

    Build it with :meth:`from_voltage` unless both coordinates are known;
    the constructor only checks positivity, :meth:`check` checks membership.
    """

    x1_star: float
    x2_star: float

    def __post_init__(self):
        if not (self.x1_star > 0 and self.x2_star > 0):
            raise ModelDomainError(
                f"equilibrium must be strictly positive, got ({self.x1_star}, {self.x2_star})")

    @classmethod
    def from_voltage(cls, x2_star: float, P: float, E: float) -> "Equilibrium":
        eq = cls(equilibrium_current(x2_star, P, E), x2_star)
        eq.check(P, E)
        return eq

    def check(self, P: float, E: float, rtol: float = 1e-12) -> None:
        expected = equilibrium_current(self.x2_star, P, E)
        if abs(self.x1_star - expected) > rtol * abs(expected):
            raise ModelDomainError(
                f"x1_star={self.x1_star} is not on the equilibrium set (expected {expected})")

    def as_state(self) -> State:
        return State(self.x1_star, self.x2_star)


class PiecewiseConstant:
    """Right-continuous piecewise-constant signal defined by ``(time, value)`` breakpoints.

    The first breakpoint must sit at ``t = 0``; times are strictly increasing
    and values strictly positive.
    """

    def __init__(self, breakpoints: Iterable[Sequence[float]]):
        pts = tuple((float(t), float(v)) for t, v in breakpoints)
        if not pts:
            raise ModelDomainError("schedule needs at least one breakpoint")
        if pts[0][0] != 0.0:
            raise ModelDomainError("first breakpoint must be at t = 0")
        for (t0, _), (t1, _) in zip(pts, pts[1:]):
            if not t1 > t0:
                raise ModelDomainError("breakpoint times must be strictly increasing")
        for _, v in pts:
            if not (math.isfinite(v) and v > 0):
                raise ModelDomainError(f"schedule values must be positive, got {v!r}")
        self.breakpoints = pts

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls([(0.0, value)])

    def __call__(self, t: float) -> float:
        value = self.breakpoints[0][1]
        for tb, v in self.breakpoints:
            if t >= tb:
                value = v
            else:
                break
        return value

    value_at = __call__

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.breakpoints])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.breakpoints])

    def distinct_values(self) -> list[float]:
        return sorted({v for _, v in self.breakpoints})

    def __eq__(self, other):
        return isinstance(other, PiecewiseConstant) and self.breakpoints == other.breakpoints

    def __repr__(self):
        return f"{type(self).__name__}({list(self.breakpoints)!r})"


class PowerSchedule(PiecewiseConstant):
    """Load power ``P(t)`` [W]."""


def _check_duty(u: float) -> None:
    if not 0.0 <= u <= 1.0:
        raise ModelDomainError(f"duty ratio must lie in [0, 1], got {u!r}")


def cpl_current(x2: float, P: float) -> float:
    """Current drawn by the ideal constant power load."""
    if not x2 > X2_FLOOR:
        raise ModelDomainError(f"x2={x2!r} V is below the CPL validity floor {X2_FLOOR} V")
    return P / x2


def averaged_dynamics(s: State, u: float, P: float, p: ConverterParams) -> tuple[float, float]:
    """Right-hand side of the averaged model, ``(dx1/dt, dx2/dt)``."""
    _check_duty(u)
    i_o = cpl_current(s.x2, P)
    dx1 = (-(1.0 - u) * s.x2 + u * p.E) / p.L
    dx2 = ((1.0 - u) * s.x1 - i_o) / p.C
    return dx1, dx2


def switched_dynamics(s: State, switch_on: bool, P: float, p: ConverterParams) -> tuple[float, float]:
    """Instantaneous-topology dynamics: the averaged model with ``u`` in {0, 1}."""
    return averaged_dynamics(s, 1.0 if switch_on else 0.0, P, p)


def equilibrium_current(x2_star: float, P: float, E: float) -> float:
    """Inductor current ``P (1/x2* + 1/E)`` that makes ``x2*`` an equilibrium."""
    if not x2_star > 0:
        raise ModelDomainError(f"x2_star must be positive, got {x2_star!r}")
    if not E > 0:
        raise ModelDomainError(f"E must be positive, got {E!r}")
    if P < 0:
        raise ModelDomainError(f"P must be non-negative, got {P!r}")
    return P * (1.0 / x2_star + 1.0 / E)


def equilibrium_duty(x2_star: float, E: float) -> float:
    """Duty ratio holding ``x2*`` in steady state, ``x2* / (x2* + E)``.

    It does not depend on the load power.
    """
    if not (x2_star > 0 and E > 0):
        raise ModelDomainError("x2_star and E must be positive")
    return x2_star / (x2_star + E)


def ripple_sizing(E: float, x2_star: float, P: float, f_sw: float,
                  ripple_i: float, ripple_v: float) -> tuple[float, float]:
    """Minimum ``(L, C)`` for given peak-to-peak ripple fractions.

    Uses the usual CCM peak-to-peak convention with ``D = x2*/(x2*+E)``::

        dI = E D / (L f_sw)          <= ripple_i * x1*
        dV = D (P / x2*) / (C f_sw)  <= ripple_v * x2*

    The example design of 5.859 mH / 480 uF quoted for (15 V, 25 V, 30 W,
    100 kHz, 5 %, 1 %) is not reproduced by this convention, which gives
    0.586 mH / 30 uF; see ``tests/test_model.py``.
    """
    for name, v in (("E", E), ("x2_star", x2_star), ("P", P), ("f_sw", f_sw)):
        if not v > 0:
            raise ModelDomainError(f"{name} must be positive, got {v!r}")
    for name, v in (("ripple_i", ripple_i), ("ripple_v", ripple_v)):
        if not 0 < v < 1:
            raise ModelDomainError(f"{name} must lie in (0, 1), got {v!r}")
    D = equilibrium_duty(x2_star, E)
    x1_star = equilibrium_current(x2_star, P, E)
    L_min = E * D / (f_sw * ripple_i * x1_star)
    C_min = D * (P / x2_star) / (f_sw * ripple_v * x2_star)
    return L_min, C_min


#: Reference board parameters (both operating points share L, C, E).
BOARD_PARAMS = ConverterParams(L=216.8e-6, C=1380e-6, E=15.0)
#: Reference operating points as ``(x2_star, P_nominal_steps)``.
BOOST_POINT = (25.0, (20.0, 30.0))
BUCK_POINT = (12.0, (6.0, 12.0))
