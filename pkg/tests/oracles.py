"""Independent high-precision reference implementations used by the tests.

Everything here is written with mpmath at 40 significant digits and uses
numerical differentiation or root finding instead of the closed forms in the
package, so agreement is a genuine cross-check.
"""
import mpmath as mp

mp.mp.dps = 40


def hd(x1, x2, P, E, L, C, k1, k2):
    x1, x2, P, E, L, C, k1, k2 = map(mp.mpf, (x1, x2, P, E, L, C, k1, k2))
    W = C * x2 ** 2 + 2 * L * x1 ** 2
    z = W / (2 * C)
    return (-C * E * x2 / (2 * L)
            - mp.sqrt(C / (2 * L)) * P * mp.atan(mp.sqrt(2 * L) * x1 / (mp.sqrt(C) * x2))
            - P * E * C * mp.atanh(mp.sqrt(2 * L) * x1 / mp.sqrt(W)) / mp.sqrt(2 * L * W)
            + k1 / 2 * (z + k2) ** 2)


def grad(x1, x2, *args):
    f = lambda a, b: hd(a, b, *args)
    return (mp.diff(f, (x1, x2), (1, 0)), mp.diff(f, (x1, x2), (0, 1)))


def hess(x1, x2, *args):
    f = lambda a, b: hd(a, b, *args)
    return (mp.diff(f, (x1, x2), (2, 0)), mp.diff(f, (x1, x2), (1, 1)), mp.diff(f, (x1, x2), (0, 2)))


def fd(x1, x2, E, L, C):
    x1, x2, E, L, C = map(mp.mpf, (x1, x2, E, L, C))
    vT = E + x2
    off = 2 * x2 / (C * vT)
    return mp.matrix([[-x2 / (L * x1), -off], [off, -2 * L * E * x1 / (C ** 2 * vT ** 2)]])


def plant(x1, x2, u, P, E, L, C):
    """Averaged model split as f + g u."""
    x1, x2, P, E, L, C = map(mp.mpf, (x1, x2, P, E, L, C))
    f = mp.matrix([-x2 / L, (x1 - P / x2) / C])
    g = mp.matrix([(x2 + E) / L, -x1 / C])
    return f + g * u, f, g


def duty(x1, x2, P, E, L, C, k1, k2):
    """Least-squares projection of the target field onto the input direction."""
    _, f, g = plant(x1, x2, 0, P, E, L, C)
    target = fd(x1, x2, E, L, C) * mp.matrix(grad(x1, x2, P, E, L, C, k1, k2))
    r = target - f
    return (g[0] * r[0] + g[1] * r[1]) / (g[0] ** 2 + g[1] ** 2)


def k2_stationary(x1s, x2s, P, E, L, C, k1):
    """k2 making x* stationary, from the second gradient component."""
    g_free = grad(x1s, x2s, P, E, L, C, 0, 0)[1]
    x1s, x2s, L, C = map(mp.mpf, (x1s, x2s, L, C))
    z = (C * x2s ** 2 + 2 * L * x1s ** 2) / (2 * C)
    return -g_free / (k1 * x2s) - z


def k1_det_root(x1s, x2s, P, E, L, C, guess=-1e-3):
    """k1 where det Hessian(x*) vanishes with k2 kept stationary."""
    def det(k1):
        h11, h12, h22 = hess(x1s, x2s, P, E, L, C, k1, k2_stationary(x1s, x2s, P, E, L, C, k1))
        return h11 * h22 - h12 ** 2
    return mp.findroot(det, (mp.mpf(guess), mp.mpf(guess) * 1.5), solver="secant")


def k1_h11_root(x1s, x2s, P, E, L, C, k2):
    """k1 where the (1,1) Hessian entry at x* vanishes with k2 held fixed (it is affine in k1)."""
    a = hess(x1s, x2s, P, E, L, C, 0, k2)[0]
    b = hess(x1s, x2s, P, E, L, C, 1, k2)[0] - a
    return -a / b
