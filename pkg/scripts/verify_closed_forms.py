"""Symbolic cross-check of the closed forms used by ``idapbc_cpl.control``.

With sympy this script

* shows that the energy function satisfies the matching condition exactly
  (the annihilator applied to ``F_d grad H_d - f`` simplifies to 0),
* shows that the plant under the duty law equals the target field,
* derives the stationarity offset ``k2`` and compares it, together with the
  gradient, Hessian and duty law of the package, at random states.

Usage::

    python scripts/verify_closed_forms.py
"""
import numpy as np
import sympy as sp

from idapbc_cpl.control import _duty_raw, _grad, _hd, _hess, k2_gain
from idapbc_cpl.model import BOARD_PARAMS, Equilibrium

x1, x2, P, E, L, C, k1, k2 = sp.symbols("x1 x2 P E L C k1 k2", positive=True)
W = C * x2 ** 2 + 2 * L * x1 ** 2
H = (-C * E * x2 / (2 * L)
     - sp.sqrt(C / (2 * L)) * P * sp.atan(sp.sqrt(2 * L) * x1 / (sp.sqrt(C) * x2))
     - P * E * C * sp.atanh(sp.sqrt(2 * L) * x1 / sp.sqrt(W)) / sp.sqrt(2 * L * W)
     + k1 / 2 * (W / (2 * C) + k2) ** 2)
vT = E + x2
Fd = sp.Matrix([[-x2 / (L * x1), -2 * x2 / (C * vT)],
                [2 * x2 / (C * vT), -2 * L * E * x1 / (C ** 2 * vT ** 2)]])
grad = sp.Matrix([H.diff(x1), H.diff(x2)])
f = sp.Matrix([-x2 / L, (x1 - P / x2) / C])
g = sp.Matrix([(x2 + E) / L, -x1 / C])
g_perp = sp.Matrix([[x1 / C, (x2 + E) / L]])


def main():
    target = Fd * grad
    matching = sp.simplify((g_perp * (target - f))[0])
    print(f"annihilator . (F_d grad H_d - f) = {matching}")
    u = sp.simplify(((g.T * (target - f))[0]) / (g.T * g)[0])
    closed = sp.simplify(f + g * u - target)
    print(f"f + g u - F_d grad H_d = {list(closed)}")

    p = BOARD_PARAMS
    rng = np.random.default_rng(0)
    subs_base = {E: p.E, L: p.L, C: p.C}
    worst = {"H": 0.0, "grad": 0.0, "hess": 0.0, "duty": 0.0}
    hess = sp.hessian(H, (x1, x2))
    for _ in range(20):
        a, b = rng.uniform(0.1, 10), rng.uniform(1, 50)
        Pv, k1v, k2v = rng.uniform(1, 40), rng.uniform(1e-3, 1), rng.uniform(-300, 300)
        s = {**subs_base, x1: a, x2: b, P: Pv, k1: k1v, k2: k2v}
        args = (a, b, Pv, p.E, p.L, p.C, k1v, k2v)
        ref_H = float(H.subs(s).evalf(30))
        ref_g = np.array([float(v.subs(s).evalf(30)) for v in grad])
        ref_h = np.array([float(hess[i, j].subs(s).evalf(30)) for i, j in ((0, 0), (0, 1), (1, 1))])
        ref_u = float(u.subs(s).evalf(30))
        worst["H"] = max(worst["H"], abs(_hd(*args) - ref_H) / abs(ref_H))
        worst["grad"] = max(worst["grad"], np.linalg.norm(np.array(_grad(*args)) - ref_g)
                            / np.linalg.norm(ref_g))
        worst["hess"] = max(worst["hess"], np.linalg.norm(np.array(_hess(*args)) - ref_h)
                            / np.linalg.norm(ref_h))
        worst["duty"] = max(worst["duty"], abs(_duty_raw(*args) - ref_u) / max(1.0, abs(ref_u)))
    for k, v in worst.items():
        print(f"max relative difference, {k:>4}: {v:.2e}")

    # k2 from the second component of grad H_d(x*) = 0
    k2_expr = sp.solve(sp.Eq(grad[1], 0), k2)[0]
    for x2s, Pv in ((25.0, 30.0), (12.0, 12.0)):
        eq = Equilibrium.from_voltage(x2s, Pv, p.E)
        s = {**subs_base, x1: eq.x1_star, x2: x2s, P: Pv, k1: 0.1}
        ref = float(k2_expr.subs(s).evalf(30))
        got = k2_gain(eq, Pv, 0.1, p)
        print(f"k2 at (x2*={x2s}, P={Pv}): package {got:.12g}, symbolic {ref:.12g}")


if __name__ == "__main__":
    main()
