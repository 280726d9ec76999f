"""Numerical certificates for the IDA-PBC design.

Every check returns a :class:`CheckResult` (name, pass flag, worst value,
witness point); :func:`run_all` gathers them into a :class:`CertReport`
together with a sublevel-set estimate of the basin of attraction.

Box checks use a scrambled Halton sequence with a fixed seed, so reports are
reproducible byte for byte.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.stats import qmc
from skimage import measure

from .control import (ControllerGains, _grad, _hd, fd_matrix, grad_hd, hessian_hd,
                      k1_interval, k1_lower_bounds, k2_gain, synthesize_gains)
from .model import ConverterParams, Equilibrium, State

#: Default sampling box ``((x1_lo, x1_hi), (x2_lo, x2_hi))``.
DEFAULT_BOX = ((0.1, 10.0), (1.0, 50.0))
DEFAULT_SEED = 20240101


class GridTooSmallWarning(UserWarning):
    """The basin estimate is limited by the sampling box rather than by the energy landscape."""


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    witness: tuple | None = None
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        w = "" if self.witness is None else " at (" + ", ".join(f"{v:.6g}" for v in self.witness) + ")"
        return f"[{status}] {self.name}: worst={self.worst:.6g}{w}"


@dataclass
class CertReport:
    """Collected check results plus the basin estimate ``{H_d <= c}``."""

    checks: list = field(default_factory=list)
    c: float | None = None
    polygon: np.ndarray | None = None
    saddle: tuple | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ch.passed for ch in self.checks)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def to_text(self) -> str:
        out = [ch.line() for ch in self.checks]
        if self.c is not None:
            out.append(f"sublevel constant c = {self.c:.10g}"
                       f" ({0 if self.polygon is None else len(self.polygon)} polygon vertices)")
        if self.saddle is not None:
            out.append(f"secondary equilibrium: ({self.saddle[0]:.6g} A, {self.saddle[1]:.6g} V)")
        out.extend(f"note: {n}" for n in self.notes)
        out.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [asdict(ch) for ch in self.checks],
            "c": self.c,
            "polygon": None if self.polygon is None else self.polygon.tolist(),
            "saddle": None if self.saddle is None else list(self.saddle),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def halton_points(n: int, box=DEFAULT_BOX, seed: int = DEFAULT_SEED) -> np.ndarray:
    """``n`` scrambled-Halton points in ``box`` as an ``(n, 2)`` array."""
    (a0, a1), (b0, b1) = box
    if not (0 < a0 < a1 and 0 < b0 < b1):
        raise ValueError(f"sampling box must lie in the open positive quadrant, got {box}")
    u = qmc.Halton(d=2, scramble=True, seed=seed).random(n)
    return qmc.scale(u, [a0, b0], [a1, b1])


# --------------------------------------------------------------------------
# matching PDE


def pde_residual(x1: float, x2: float, P: float, g: ControllerGains, p: ConverterParams):
    """Residual of ``-x2 dH/dx1 + (2L x1/C) dH/dx2 = P - E x1 + P E / x2`` and its scale.

    The scale is the sum of the magnitudes of the individual terms, so that
    ``residual / scale`` is a cancellation-aware relative error.
    """
    h1, h2 = _grad(x1, x2, P, p.E, p.L, p.C, g.k1, g.k2)
    terms = (-x2 * h1, 2 * p.L * x1 / p.C * h2, -P, p.E * x1, -P * p.E / x2)
    return math.fsum(terms), math.fsum(abs(t) for t in terms)


def check_pde_residual(P: float, g: ControllerGains, p: ConverterParams, n_samples: int = 1000,
                       box=DEFAULT_BOX, seed: int = DEFAULT_SEED, tol: float = 1e-6) -> CheckResult:
    worst, witness = 0.0, None
    for x1, x2 in halton_points(n_samples, box, seed):
        r, s = pde_residual(x1, x2, P, g, p)
        rel = abs(r) / s if s > 0 else abs(r)
        if rel > worst or witness is None:
            worst, witness = rel, (float(x1), float(x2))
    return CheckResult("matching PDE residual", worst < tol, worst, witness,
                       {"n_samples": n_samples, "tol": tol, "seed": seed})


# --------------------------------------------------------------------------
# equilibrium


def shaping_gradient(s: State, g: ControllerGains, p: ConverterParams) -> np.ndarray:
    """Gradient of the shaping term ``k1/2 (z + k2)^2`` with ``z = (C x2^2 + 2L x1^2)/(2C)``."""
    z = (p.C * s.x2 ** 2 + 2 * p.L * s.x1 ** 2) / (2 * p.C)
    return g.k1 * (z + g.k2) * np.array([2 * p.L * s.x1 / p.C, s.x2])


def check_equilibrium(g: ControllerGains, P: float, p: ConverterParams,
                      tol: float = 1e-8) -> list[CheckResult]:
    """Stationarity (gradient relative to the shaping-term gradient) and curvature at ``x*``."""
    xs = g.equilibrium.as_state()
    grad = grad_hd(xs, P, g, p)
    scale = np.linalg.norm(shaping_gradient(xs, g, p))
    rel = float(np.linalg.norm(grad) / scale) if scale > 0 else float(np.linalg.norm(grad))
    eig = np.linalg.eigvalsh(hessian_hd(xs, P, g, p))
    wit = (xs.x1, xs.x2)
    return [
        CheckResult("stationarity at x*", rel < tol, rel, wit, {"tol": tol}),
        CheckResult("Hessian positive definite at x*", bool(eig.min() > 0), float(eig.min()), wit,
                    {"eigenvalues": eig.tolist()}),
    ]


def min_hessian_eig(eq: Equilibrium, P: float, k1: float, p: ConverterParams) -> float:
    k2 = k2_gain(eq, P, k1, p)
    h = hessian_hd(eq.as_state(), P, ControllerGains(k1, k2, eq, P), p)
    return float(np.linalg.eigvalsh(h).min())


def k1_flip_point(eq: Equilibrium, P: float, p: ConverterParams, k1_ref: float = 0.01,
                  iters: int = 80) -> tuple[float, float]:
    """Bisect the ``k1`` at which the Hessian at ``eq`` stops being positive definite.

    ``k2`` follows ``k1`` through the stationarity condition. The candidate
    bound ``b`` (lower end of :func:`k1_interval`) is iterated as
    ``b <- lower(k2(b))`` from ``k1_ref`` until it is self-consistent, and the
    flip is bisected in ``[b - |b|/2, b + |b|/2]``. Returns
    ``(k1_flip, lower(k2(k1_flip)))``.
    """
    b = k1_ref
    for _ in range(20):
        nb = k1_interval(eq, P, k2_gain(eq, P, b, p), p)[0]
        if nb == b:
            break
        b = nb
    lo, hi = b - 0.5 * abs(b), b + 0.5 * abs(b)
    f_lo, f_hi = min_hessian_eig(eq, P, lo, p) > 0, min_hessian_eig(eq, P, hi, p) > 0
    if f_lo == f_hi:
        raise ValueError(f"no sign flip of the Hessian in [{lo:.6g}, {hi:.6g}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if (min_hessian_eig(eq, P, mid, p) > 0) == f_hi:
            hi = mid
        else:
            lo = mid
    k1f = 0.5 * (lo + hi)
    return k1f, k1_interval(eq, P, k2_gain(eq, P, k1f, p), p)[0]


def check_k1_bound(eq: Equilibrium, P: float, p: ConverterParams, rtol: float = 0.02) -> CheckResult:
    k1f, b = k1_flip_point(eq, P, p)
    rel = abs(k1f - b) / abs(b)
    return CheckResult("Hessian flip matches k1 lower bound", rel < rtol, rel, None,
                       {"k1_flip": k1f, "bound": b, "rtol": rtol})


# --------------------------------------------------------------------------
# dissipativity


def check_fd_negativity(p: ConverterParams, n_samples: int = 1000, box=DEFAULT_BOX,
                        seed: int = DEFAULT_SEED) -> CheckResult:
    """Largest eigenvalue of ``F_d + F_d^T`` over the sample (must be negative)."""
    worst, witness = -math.inf, None
    for x1, x2 in halton_points(n_samples, box, seed):
        F = fd_matrix(State(x1, x2), p)
        m = float(np.linalg.eigvalsh(F + F.T).max())
        if m > worst:
            worst, witness = m, (float(x1), float(x2))
    return CheckResult("F_d + F_d^T negative definite", worst < 0, worst, witness,
                       {"n_samples": n_samples, "seed": seed})


# --------------------------------------------------------------------------
# basin of attraction


@njit(cache=True)
def _hd_grid(X1, X2, P, E, L, C, k1, k2):
    out = np.empty((X2.shape[0], X1.shape[0]))
    for i in range(X2.shape[0]):
        for j in range(X1.shape[0]):
            out[i, j] = _hd(X1[j], X2[i], P, E, L, C, k1, k2)
    return out


def default_region_box(eq: Equilibrium) -> tuple:
    return ((0.01 * eq.x1_star, 6.0 * eq.x1_star), (0.02 * eq.x2_star, 3.0 * eq.x2_star))


def default_search_box(eq: Equilibrium) -> tuple:
    """Box searched for secondary equilibria; the saddle moves to large x1 as k1 grows."""
    return ((0.01 * eq.x1_star, 30.0 * eq.x1_star), (0.01 * eq.x2_star, 3.0 * eq.x2_star))


def _component(H, c, seed_ij):
    mask = H <= c
    if not mask[seed_ij]:
        return None
    lab, _ = ndimage.label(mask)
    return lab == lab[seed_ij]


def _edges_touched(comp) -> set:
    edges = set()
    if comp[0, :].any():
        edges.add("x2_low")
    if comp[-1, :].any():
        edges.add("x2_high")
    if comp[:, 0].any():
        edges.add("x1_low")
    if comp[:, -1].any():
        edges.add("x1_high")
    return edges


def _largest_c(g, P, p, box, n):
    x1 = np.linspace(box[0][0], box[0][1], n)
    x2 = np.linspace(box[1][0], box[1][1], n)
    H = _hd_grid(x1, x2, P, p.E, p.L, p.C, g.k1, g.k2)
    eq = g.equilibrium
    seed_ij = (int(np.argmin(abs(x2 - eq.x2_star))), int(np.argmin(abs(x1 - eq.x1_star))))
    lo = float(H[seed_ij])
    hi = float(np.nanmax(H))
    comp_hi = _component(H, hi, seed_ij)
    if comp_hi is not None and not _edges_touched(comp_hi):
        return hi, comp_hi, x1, x2, set()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        comp = _component(H, mid, seed_ij)
        if comp is not None and not _edges_touched(comp):
            lo = mid
        else:
            hi = mid
    comp = _component(H, lo, seed_ij)
    above = _component(H, hi, seed_ij)
    return lo, comp, x1, x2, _edges_touched(above) if above is not None else set()


def estimate_attraction_region(g: ControllerGains, P: float, p: ConverterParams, box=None,
                               n: int = 101, rtol: float = 0.01, max_n: int = 1601):
    """Largest ``c`` whose ``{H_d <= c}`` component around ``x*`` stays inside ``box``.

    The grid is doubled until two successive estimates of ``c - H_d(x*)``
    differ by less than ``rtol``. Returns ``(c, polygon, info)``; the polygon
    is an ``(m, 2)`` array of ``(x1, x2)`` vertices of the component's
    boundary. A :class:`GridTooSmallWarning` is issued when growing ``c``
    further would first hit a box edge other than the low-voltage edge (where
    the energy function is unbounded below), i.e. the box, not the energy
    landscape, limits the estimate.
    """
    eq = g.equilibrium
    box = box or default_region_box(eq)
    h_star = _hd(eq.x1_star, eq.x2_star, P, p.E, p.L, p.C, g.k1, g.k2)
    prev = None
    history = []
    while True:
        c, comp, x1, x2, edges = _largest_c(g, P, p, box, n)
        history.append((n, c))
        if prev is not None and abs((c - h_star) - (prev - h_star)) <= rtol * abs(prev - h_star):
            break
        if 2 * n - 1 > max_n:
            break
        prev = c
        n = 2 * n - 1
    if edges & {"x1_high", "x2_high"}:
        warnings.warn(f"grid too small: the sublevel set reaches the box edge(s) {sorted(edges)}",
                      GridTooSmallWarning, stacklevel=2)
    polygon = np.empty((0, 2))
    if comp is not None and comp.any():
        padded = np.pad(comp.astype(float), 1)
        contours = measure.find_contours(padded, 0.5)
        if contours:
            cc = max(contours, key=len) - 1.0
            polygon = np.column_stack([np.interp(cc[:, 1], np.arange(len(x1)), x1),
                                       np.interp(cc[:, 0], np.arange(len(x2)), x2)])
    info = {"h_star": h_star, "grid_history": history, "limiting_edges": sorted(edges)}
    return c, polygon, info


def point_in_polygon(pt, polygon) -> bool:
    """Even-odd ray-casting test."""
    x, y = pt
    inside = False
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xc > x:
                inside = not inside
    return inside


# --------------------------------------------------------------------------
# secondary equilibria


def _field(x, P, g, p):
    s = State(float(x[0]), float(x[1]))
    return fd_matrix(s, p) @ np.array(_grad(s.x1, s.x2, P, p.E, p.L, p.C, g.k1, g.k2))


def fd_jacobian(fun, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with per-coordinate relative steps."""
    x = np.asarray(x, dtype=float)
    J = np.empty((len(x), len(x)))
    for j in range(len(x)):
        h = rel_step * max(abs(x[j]), 1e-3)
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return J


def classify(eigs) -> str:
    re_ = np.real(eigs)
    if np.all(re_ < 0):
        return "stable"
    if np.all(re_ > 0):
        return "unstable"
    if re_.min() < 0 < re_.max():
        return "saddle"
    return "degenerate"


@dataclass
class CriticalPoint:
    state: tuple
    eigenvalues: tuple
    kind: str
    robust: bool


def find_zeros(g: ControllerGains, P: float, p: ConverterParams, seeds, box=None,
               tol: float = 1e-10, max_iter: int = 100) -> list[CriticalPoint]:
    """Damped Newton from each seed on the closed-loop field ``F_d grad H_d``."""
    eq = g.equilibrium
    box = box or default_search_box(eq)
    scale = np.array([p.L, p.C])

    def fun(x):
        return _field(x, P, g, p)

    def inside(x):
        return box[0][0] <= x[0] <= box[0][1] and box[1][0] <= x[1] <= box[1][1]

    found: list[CriticalPoint] = []
    for seed in seeds:
        x = np.array(seed, dtype=float)
        if not inside(x):
            continue
        ok = False
        for _ in range(max_iter):
            F = fun(x)
            nF = np.linalg.norm(F * scale)
            try:
                step = np.linalg.solve(fd_jacobian(fun, x), -F)
            except np.linalg.LinAlgError:
                break
            if np.linalg.norm(step) <= tol * np.linalg.norm(x):
                ok = True          # residual already at round-off level
                break
            lam = 1.0
            while lam > 1e-8:
                xn = x + lam * step
                if inside(xn) and np.linalg.norm(fun(xn) * scale) < nF:
                    break
                lam *= 0.5
            else:
                break
            x = xn
            if np.linalg.norm(lam * step) <= tol * np.linalg.norm(x):
                ok = True
                break
        if not ok:
            continue
        if any(np.allclose(x, c.state, rtol=1e-6) for c in found):
            continue
        e1 = np.linalg.eigvals(fd_jacobian(fun, x, 1e-6))
        e2 = np.linalg.eigvals(fd_jacobian(fun, x, 5e-7))
        kind = classify(e1)
        found.append(CriticalPoint((float(x[0]), float(x[1])), tuple(complex(v) for v in e1),
                                   kind, kind == classify(e2)))
    return found


def locate_secondary_equilibrium(g: ControllerGains, P: float, p: ConverterParams,
                                 seeds=None, box=None) -> CriticalPoint | None:
    """The first zero of the closed-loop field distinct from ``x*``, or ``None``."""
    eq = g.equilibrium
    box = box or default_search_box(eq)
    if seeds is None:
        seeds = [(a, b) for a in np.geomspace(box[0][0], box[0][1], 13)[1:-1]
                 for b in np.geomspace(box[1][0], box[1][1], 11)[1:-1]]
    for cp in find_zeros(g, P, p, seeds, box):
        if not np.allclose(cp.state, (eq.x1_star, eq.x2_star), rtol=1e-6):
            return cp
    return None


def check_saddle_outside_region(saddle: CriticalPoint | None, c: float, g: ControllerGains,
                                P: float, p: ConverterParams) -> CheckResult:
    """The basin estimate must sit strictly below the saddle's energy level."""
    if saddle is None:
        return CheckResult("basin level below saddle", True, math.nan, None,
                           {"note": "no secondary equilibrium found"})
    hs = _hd(saddle.state[0], saddle.state[1], P, p.E, p.L, p.C, g.k1, g.k2)
    return CheckResult("basin level below saddle", bool(c < hs), float(hs - c), saddle.state,
                       {"c": c, "H_saddle": hs, "kind": saddle.kind})


# --------------------------------------------------------------------------
# estimator


def fit_decay_rates(t, P_tilde, P_true, floor: float = 1e-7, min_points: int = 20):
    """Least-squares slope of ``log|P_tilde|`` on each constant-load segment.

    Samples below ``floor`` W (round-off level) are ignored, as are the
    first samples of each segment up to the first sample after the step.
    """
    t = np.asarray(t)
    P_tilde = np.asarray(P_tilde)
    P_true = np.asarray(P_true)
    cuts = np.nonzero(np.diff(P_true) != 0)[0] + 1
    bounds = [0, *cuts.tolist(), len(t)]
    out = []
    for a, b in zip(bounds, bounds[1:]):
        seg_t, seg_e = t[a + 1:b], np.abs(P_tilde[a + 1:b])
        keep = seg_e > floor
        if keep.sum() < min_points:
            continue
        slope = np.polyfit(seg_t[keep], np.log(seg_e[keep]), 1)[0]
        out.append((float(t[a]), float(slope)))
    return out


def check_estimator_decay(traj, gamma: float, rtol: float = 0.05) -> CheckResult:
    rates = fit_decay_rates(traj.t, traj.P_hat - traj.P, traj.P)
    if not rates:
        return CheckResult("estimator decay rate", False, math.nan, None,
                           {"note": "no segment with a measurable estimation error"})
    errs = [abs(s + gamma) / gamma for _, s in rates]
    k = int(np.argmax(errs))
    return CheckResult("estimator decay rate", max(errs) < rtol, max(errs), (rates[k][0],),
                       {"gamma": gamma, "slopes": [s for _, s in rates]})


# --------------------------------------------------------------------------
# suite


def run_all(x2_star: float, P: float, p: ConverterParams, k1: float,
            safety_margin: float = 1.0, seed: int = DEFAULT_SEED, n_samples: int = 1000,
            k2_perturb: float = 0.0, estimator_traj=None, gamma: float | None = None) -> CertReport:
    """Synthesize gains for ``(x2*, P)`` and run every check."""
    rep = CertReport()
    eq = Equilibrium.from_voltage(x2_star, P, p.E)
    g = synthesize_gains(eq, P, p, k1_seed=k1, safety_margin=safety_margin)
    if k2_perturb:
        g = ControllerGains(g.k1, g.k2 * (1 + k2_perturb), eq, P)
        rep.notes.append(f"k2 perturbed by {k2_perturb:+.3%}")
    rep.notes.append(f"gains: k1={g.k1:.10g}, k2={g.k2:.10g}")
    rep.add(check_pde_residual(P, g, p, n_samples, seed=seed))
    for ch in check_equilibrium(g, P, p):
        rep.add(ch)
    rep.add(check_k1_bound(eq, P, p))
    rep.add(check_fd_negativity(p, n_samples, seed=seed))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GridTooSmallWarning)
        c, poly, info = estimate_attraction_region(g, P, p)
    rep.notes.extend(str(w.message) for w in caught)
    rep.c, rep.polygon = c, poly
    inside = point_in_polygon((eq.x1_star, eq.x2_star), poly) if len(poly) else False
    rep.add(CheckResult("x* inside basin estimate", inside, c - info["h_star"], (eq.x1_star, eq.x2_star)))
    saddle = locate_secondary_equilibrium(g, P, p)
    if saddle is not None:
        rep.saddle = saddle.state
        rep.notes.append(f"secondary equilibrium is a {saddle.kind} "
                         f"(classification {'robust' if saddle.robust else 'NOT robust'} to FD step)")
    else:
        rep.notes.append("no secondary equilibrium found in the search box")
    rep.add(check_saddle_outside_region(saddle, c, g, P, p))
    if estimator_traj is not None:
        rep.add(check_estimator_decay(estimator_traj, gamma))
    return rep
