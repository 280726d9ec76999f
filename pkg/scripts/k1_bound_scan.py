"""Scan k1 at an operating point: k2(k1), the certified k1 interval, and the Hessian at x*.

Shows where positive definiteness of the Hessian flips when k2 follows k1
through the stationarity condition, and which of the two bounds is active.

Usage::

    python scripts/k1_bound_scan.py [x2_star P]
"""
import sys

import numpy as np

from idapbc_cpl.certify import k1_flip_point, min_hessian_eig
from idapbc_cpl.control import k1_interval, k1_lower_bounds, k2_gain
from idapbc_cpl.model import BOARD_PARAMS, Equilibrium


def main(x2s=25.0, P=30.0):
    p = BOARD_PARAMS
    eq = Equilibrium.from_voltage(x2s, P, p.E)
    print(f"x* = ({eq.x1_star:.6g} A, {eq.x2_star:.6g} V), P = {P} W")
    print(f"{'k1':>12} {'k2':>14} {'k1_prime':>12} {'k1_dprime':>12} {'interval':>26} {'min eig':>12}")
    for k1 in np.concatenate([-np.geomspace(0.05, 1e-4, 7), np.geomspace(1e-4, 1.0, 9)]):
        k2 = k2_gain(eq, P, k1, p)
        a, b = k1_lower_bounds(eq, P, k2, p)
        lo, hi = k1_interval(eq, P, k2, p)
        print(f"{k1:12.4g} {k2:14.6g} {a:12.4g} {b:12.4g} {f'({lo:.4g}, {hi:.4g})':>26} "
              f"{min_hessian_eig(eq, P, k1, p):12.4g}")
    k1f, bound = k1_flip_point(eq, P, p)
    print(f"Hessian flip at k1 = {k1f:.10g}; self-consistent lower bound {bound:.10g}")


if __name__ == "__main__":
    main(*[float(a) for a in sys.argv[1:3]])
