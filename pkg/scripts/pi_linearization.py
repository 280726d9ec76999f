"""Eigenvalues of the averaged converter + CPL loop, open loop and under the PI baseline.

The lossless averaged model with a constant power load has an unstable pair
of poles at every boost operating point; with ``kp = 0.002, ki = 0.001`` the
PI loop leaves that pair in the right half-plane, so a load step excites a
growing oscillation that ends with the output voltage collapsing.

Usage::

    python scripts/pi_linearization.py [kp ki]
"""
import sys

import numpy as np

from idapbc_cpl.model import BOARD_PARAMS, equilibrium_current, equilibrium_duty


def pi_field(y, P, x2s, kp, ki, p):
    x1, x2, integ = y
    e = x2s - x2
    u = kp * e + ki * integ
    return np.array([(-(1 - u) * x2 + u * p.E) / p.L, ((1 - u) * x1 - P / x2) / p.C, e])


def jacobian(fun, y, h=1e-7):
    cols = [(fun(y + d) - fun(y - d)) / (2 * h) for d in np.eye(len(y)) * h]
    return np.column_stack(cols)


def main(kp=0.002, ki=0.001, x2s=25.0):
    p = BOARD_PARAMS
    print(f"E = {p.E} V, x2* = {x2s} V, kp = {kp}, ki = {ki}")
    for P in (10.0, 20.0, 25.0, 30.0):
        y = np.array([equilibrium_current(x2s, P, p.E), x2s, equilibrium_duty(x2s, p.E) / ki])
        J = jacobian(lambda v: pi_field(v, P, x2s, kp, ki, p), y)
        # open loop: duty frozen at its equilibrium value (kp = 0, integrator held)
        ol = np.linalg.eigvals(jacobian(lambda v: pi_field(v, P, x2s, 0.0, ki, p), y)[:2, :2])
        cl = np.linalg.eigvals(J)
        print(f"P = {P:5.1f} W  open loop: {np.array2string(ol, precision=3)}")
        print(f"            PI closed loop: {np.array2string(cl, precision=3)}"
              f"  -> {'unstable' if cl.real.max() > 0 else 'stable'}")


if __name__ == "__main__":
    args = [float(a) for a in sys.argv[1:3]]
    main(*args)
