"""Immersion-and-invariance estimator of the unknown CPL power.

The estimate is ``P_hat = P_I - gamma C x2^2 / 2`` with

    dP_I/dt = gamma x1 x2 (1 - u) + gamma^2 C x2^2 / 2 - gamma P_I,

so that along the averaged plant the error ``P_hat - P`` obeys
``d/dt (P_hat - P) = -gamma (P_hat - P)`` whatever the duty signal is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from numba import njit

from .model import ConverterParams, ModelDomainError

#: Estimates below this are floored before they reach the duty law [W].
P_HAT_MIN = 0.5


@dataclass
class EstimatorState:
    gamma: float
    P_I: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ModelDomainError(f"gamma must be positive, got {self.gamma!r}")


@njit(cache=True, nogil=True)
def _estimate(P_I, x2, gamma, C):
    return P_I - 0.5 * gamma * C * x2 * x2


@njit(cache=True, nogil=True)
def _derivative(P_I, x1, x2, u, gamma, C):
    return gamma * x1 * x2 * (1.0 - u) + 0.5 * gamma * gamma * C * x2 * x2 - gamma * P_I


@njit(cache=True, nogil=True)
def _hold_step(P_I, x1, x2, u, gamma, C, h):
    # exact solution of the linear P_I equation with (x1, x2, u) held over h
    target = x1 * x2 * (1.0 - u) + 0.5 * gamma * C * x2 * x2
    decay = math.exp(-gamma * h)
    return decay * P_I + (1.0 - decay) * target


def estimator_init(gamma: float, x2_0: float, P_hat_0: float,
                   p: ConverterParams) -> EstimatorState:
    """Estimator whose first reading at ``x2_0`` is ``P_hat_0``."""
    if not P_hat_0 > 0:
        raise ModelDomainError(f"P_hat_0 must be positive, got {P_hat_0!r}")
    return EstimatorState(gamma, P_hat_0 + 0.5 * gamma * p.C * x2_0 ** 2)


def read_estimate(e: EstimatorState, x2: float, p: ConverterParams) -> float:
    return _estimate(e.P_I, x2, e.gamma, p.C)


def estimator_derivative(e: EstimatorState, x1: float, x2: float, u: float,
                         p: ConverterParams) -> float:
    if not 0.0 <= u <= 1.0:
        raise ModelDomainError(f"duty ratio must lie in [0, 1], got {u!r}")
    return _derivative(e.P_I, x1, x2, u, e.gamma, p.C)


def estimator_hold_step(e: EstimatorState, x1: float, x2: float, u: float, h: float,
                        p: ConverterParams) -> None:
    """Advance ``e`` by ``h`` seconds with the inputs held (sampled-data update)."""
    if not 0.0 <= u <= 1.0:
        raise ModelDomainError(f"duty ratio must lie in [0, 1], got {u!r}")
    e.P_I = _hold_step(e.P_I, x1, x2, u, e.gamma, p.C, h)


def floored_estimate(P_hat: float) -> float:
    return P_hat if P_hat >= P_HAT_MIN else P_HAT_MIN
