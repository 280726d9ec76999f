"""Acceptance criteria 1-14, each reported as one PASS/FAIL line in the terminal summary."""
import math
import time

import numpy as np
import pytest

from conftest import OPERATING_POINTS
from idapbc_cpl.certify import (check_equilibrium, check_fd_negativity, check_k1_bound,
                                check_pde_residual, fit_decay_rates, locate_secondary_equilibrium)
from idapbc_cpl.cli import main, phase_scenarios, steady_state
from idapbc_cpl.control import _grad, _hd, gains_for, hessian_hd, k1_interval, k2_gain
from idapbc_cpl.model import (BOARD_PARAMS, Equilibrium, PiecewiseConstant, PowerSchedule, State,
                              equilibrium_current)
from idapbc_cpl.scenario import BUNDLED, load_bundled
from idapbc_cpl.sim import ModelValidityError, run_many, settle_time, simulate

p = BOARD_PARAMS
POINTS = sorted(OPERATING_POINTS)


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# ---- 1 ---------------------------------------------------------------------------------


def test_criterion_01_equilibrium_reproduction(report_criterion):
    x1 = equilibrium_current(25.0, 30.0, 15.0)
    ok = abs(x1 - 3.2) <= 1e-12
    report_criterion(1, ok, f"x1* = {x1!r} A (target 3.2 +/- 1e-12)")
    assert ok


# ---- 2 ---------------------------------------------------------------------------------


def test_criterion_02_matching_pde(report_criterion):
    results, elapsed = [], 0.0
    for name in POINTS:
        x2s, P = OPERATING_POINTS[name]
        res, dt = timed(check_pde_residual, P, gains_for(x2s, P, p, 0.1), p, 1000)
        results.append((name, res))
        elapsed += dt
    worst = max(r.worst for _, r in results)
    ok = all(r.passed for _, r in results) and worst < 1e-6 and elapsed < 1.0
    report_criterion(2, ok, f"max relative residual {worst:.2e} over 2x1000 states (< 1e-6), "
                            f"{elapsed:.2f} s")
    assert ok


# ---- 3 ---------------------------------------------------------------------------------


def test_criterion_03_stationarity_and_curvature(report_criterion):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name in POINTS:
        x2s, P = OPERATING_POINTS[name]
        eq = Equilibrium.from_voltage(x2s, P, p.E)
        g = gains_for(x2s, P, p, 0.1)
        stat, curv = check_equilibrium(g, P, p)
        bound = check_k1_bound(eq, P, p, rtol=0.02)
        k1f = bound.detail["k1_flip"]
        lo, hi = k1_interval(eq, P, k2_gain(eq, P, k1f, p), p)
        ok &= stat.passed and curv.passed and bound.passed
        parts.append(f"{name}: |grad| {stat.worst:.1e}, min eig {curv.worst:.3g}, "
                     f"flip k1={k1f:.6g} vs bound {bound.detail['bound']:.6g} "
                     f"(certified interval ({lo:.4g}, {hi:.4g}), rel {bound.worst:.1e})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    report_criterion(3, ok, "; ".join(parts) + f"; {elapsed:.2f} s")
    assert ok


# ---- 4 ---------------------------------------------------------------------------------


def test_criterion_04_fd_dissipativity(report_criterion):
    res, elapsed = timed(check_fd_negativity, p, 1000)
    ok = res.passed and elapsed < 1.0
    report_criterion(4, ok, f"max eig(F_d + F_d^T) = {res.worst:.4g} over 1000 states, {elapsed:.2f} s")
    assert ok


# ---- 5 ---------------------------------------------------------------------------------


def _fd_errors(rng, x2s, P, n=100):
    g = gains_for(x2s, P, p, 0.1)
    args = (P, p.E, p.L, p.C, g.k1, g.k2)
    worst_g = worst_h = 0.0
    for x1, x2 in zip(rng.uniform(0.1, 10, n), rng.uniform(1, 50, n)):
        h1, h2 = 1e-5 * x1, 1e-5 * x2
        fd_g = np.array([(_hd(x1 + h1, x2, *args) - _hd(x1 - h1, x2, *args)) / (2 * h1),
                         (_hd(x1, x2 + h2, *args) - _hd(x1, x2 - h2, *args)) / (2 * h2)])
        an_g = np.array(_grad(x1, x2, *args))
        worst_g = max(worst_g, np.linalg.norm(fd_g - an_g) / np.linalg.norm(an_g))
        col1 = (np.array(_grad(x1 + h1, x2, *args)) - np.array(_grad(x1 - h1, x2, *args))) / (2 * h1)
        col2 = (np.array(_grad(x1, x2 + h2, *args)) - np.array(_grad(x1, x2 - h2, *args))) / (2 * h2)
        fd_h = np.column_stack([col1, col2])
        an_h = hessian_hd(State(x1, x2), P, g, p)
        worst_h = max(worst_h, np.linalg.norm(fd_h - an_h) / np.linalg.norm(an_h))
    return worst_g, worst_h


def test_criterion_05_derivatives_vs_finite_differences(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    errs = [_fd_errors(rng, *OPERATING_POINTS[name]) for name in POINTS]
    elapsed = time.perf_counter() - t0
    eg, eh = max(e[0] for e in errs), max(e[1] for e in errs)
    ok = eg < 1e-5 and eh < 1e-4 and elapsed < 1.0
    report_criterion(5, ok, f"gradient rel err {eg:.1e} (< 1e-5), Hessian rel err {eh:.1e} (< 1e-4) "
                            f"at 2x100 states, {elapsed:.2f} s")
    assert ok


# ---- 6 ---------------------------------------------------------------------------------


def test_criterion_06_estimator_decay(report_criterion):
    sc = load_bundled("fig7_boost_step").replace(P_hat_error=10.0).replace_sim(t_end=1.0)
    traj = simulate(sc)
    (t_seg, slope), = fit_decay_rates(traj.t, traj.P_tilde, traj.P)
    at = float(np.interp(0.25, traj.t, traj.P_tilde))
    limit = 10 * math.exp(-5) * 1.05
    ok = abs(slope + 20) <= 0.05 * 20 and abs(at) < limit
    report_criterion(6, ok, f"fitted slope {slope:.5f} 1/s (-20 +/- 5%), |P~(0.25 s)| = {at:.6f} W "
                            f"(< {limit:.6f})")
    assert ok


# ---- 7, 8, 13 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def step_runs():
    out = {}
    for name in ("fig7_boost_step", "fig8_buck_step"):
        sc = load_bundled(name)
        avg, t_avg = timed(simulate, sc.replace_sim(mode="averaged", dt=None))
        sw, t_sw = timed(simulate, sc.replace_sim(mode="switched", dt=2.5e-7))
        out[name] = (sc, avg, t_avg, sw, t_sw)
    return out


def _step_criterion(number, name, step_runs, report_criterion):
    sc, avg, t_avg, sw, t_sw = step_runs[name]
    x2s = sc.schedule.x2_star(0.0)
    m_avg = steady_state(avg, x2s)[0]
    m_sw = steady_state(sw, x2s)[0]
    # after transients: the second half of the post-step interval
    t_step = sc.schedule.P.times[1]
    t0 = t_step + 0.5 * (sc.sim.t_end - t_step)
    disc = float(np.max(np.abs(sw.x2[sw.window(t0)] - avg.x2[avg.window(t0)])))
    band = 0.01 * x2s
    ok = (abs(m_avg - x2s) < band and abs(m_sw - x2s) < band and disc < 0.5
          and t_avg < 5.0 and t_sw < 120.0)
    report_criterion(number, ok,
                     f"steady |x2-{x2s:g}|: averaged {abs(m_avg - x2s):.2e} V, switched "
                     f"{abs(m_sw - x2s):.2e} V (< {band:g}); filtered discrepancy {disc:.4f} V (< 0.5); "
                     f"runtime {t_avg:.1f} s / {t_sw:.1f} s")
    assert ok


def test_criterion_07_boost_step(step_runs, report_criterion):
    _step_criterion(7, "fig7_boost_step", step_runs, report_criterion)


def test_criterion_08_buck_step(step_runs, report_criterion):
    _step_criterion(8, "fig8_buck_step", step_runs, report_criterion)


def test_criterion_13_lyapunov_descent(step_runs, report_criterion):
    sc, avg, *_ = step_runs["fig7_boost_step"]
    t_step = sc.schedule.P.times[1]
    P = sc.schedule.P(t_step)
    g = gains_for(sc.schedule.x2_star(t_step), P, p, sc.k1)
    post = avg.t >= t_step
    conv = post & (np.abs(avg.P_tilde) < 0.01 * P)
    t0 = float(avg.t[np.argmax(conv)])
    w = avg.window(t0)
    H = np.array([_hd(a, b, P, p.E, p.L, p.C, g.k1, g.k2) for a, b in zip(avg.x1[w], avg.x2[w])])
    rise = float(np.max(np.diff(H)))
    ok = rise <= 1e-8
    report_criterion(13, ok, f"max H_d increase {rise:.2e} between samples for t >= {t0:.4f} s "
                             f"({w.sum()} samples, tolerance 1e-8)")
    assert ok


# ---- 9 ---------------------------------------------------------------------------------


def test_criterion_09_phase_plot(report_criterion):
    t0 = time.perf_counter()
    sc = load_bundled("fig4_phase")
    x2_0 = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0]
    results = run_many(phase_scenarios(sc, x2_0))
    eq = Equilibrium.from_voltage(25.0, 30.0, p.E)
    bad = []
    for v, r in zip(x2_0, results):
        if isinstance(r, Exception) or not (abs(r.x1[-1] - eq.x1_star) <= 1e-3 * eq.x1_star
                                            and abs(r.x2[-1] - eq.x2_star) <= 1e-3 * eq.x2_star):
            bad.append(v)
    g = gains_for(25.0, 30.0, p, sc.k1)
    sad = locate_secondary_equilibrium(g, 30.0, p)
    elapsed = time.perf_counter() - t0
    ok = not bad and sad is not None and sad.kind == "saddle" and elapsed < 30.0
    where = f"({sad.state[0]:.4f} A, {sad.state[1]:.4f} V), {sad.kind}" if sad else "none"
    report_criterion(9, ok, f"{len(x2_0) - len(bad)}/{len(x2_0)} trajectories converge to (3.2, 25) "
                            f"within 0.1%; secondary zero {where}; {elapsed:.1f} s")
    assert ok


# ---- 10 --------------------------------------------------------------------------------


def test_criterion_10_pi_comparison(report_criterion):
    t0 = time.perf_counter()
    sc = load_bundled("fig5_pi")
    ida, pi = run_many([sc, sc.replace(controller="pi")])
    elapsed = time.perf_counter() - t0
    t_step = sc.schedule.P.times[1]
    if isinstance(ida, Exception):
        rec, peak = math.inf, math.inf
    else:
        rec = settle_time(ida.t, ida.x2, 25.0, 0.25, t_step)
        peak = float(np.max(np.abs(ida.x2[ida.window(t_step)] - 25.0)))
    ida_ok = rec < 0.3
    if isinstance(pi, ModelValidityError):
        pi_ok = False
        pi_text = f"PI run left the model domain at t = {pi.t:.4f} s ({pi.trajectory.status})"
    else:
        dev = float(np.max(np.abs(pi.x2[pi.window(t_step + 8.0)] - 25.0)))
        pi_ok = dev > 0.1
        pi_text = f"PI peak |x2-25| after t = {t_step + 8:g} s: {dev:.4f} V (> 0.1)"
    ok = ida_ok and pi_ok and elapsed < 30.0
    report_criterion(10, ok, f"IDA-PBC back in the 1% band {rec * 1e3:.1f} ms after the step (< 300 ms; "
                             f"peak deviation {peak:.3f} V); "
                             f"{pi_text}; {elapsed:.1f} s")
    assert ok


# ---- 11, 12 -----------------------------------------------------------------------------


def test_criterion_11_line_regulation(report_criterion):
    t0 = time.perf_counter()
    sc = load_bundled("fig9_line_reg")
    Es = [float(e) for e in range(6, 29)]
    scs = [sc.replace(schedule=type(sc.schedule)(sc.schedule.P, sc.schedule.x2_star,
                                                 PiecewiseConstant.constant(E))) for E in Es]
    results = run_many(scs)
    errs = [abs(steady_state(r, 15.0)[0] - 15.0) if not isinstance(r, Exception) else math.inf
            for r in results]
    elapsed = time.perf_counter() - t0
    ok = len(errs) == 23 and max(errs) < 0.15 and elapsed < 60.0
    report_criterion(11, ok, f"{sum(e < 0.15 for e in errs)}/23 steady outputs within 1% of 15 V, "
                             f"max error {max(errs):.2e} V; {elapsed:.1f} s")
    assert ok


def test_criterion_12_load_regulation(report_criterion):
    t0 = time.perf_counter()
    sc = load_bundled("fig10_load_reg")
    Ps = [5.0 + 2.5 * k for k in range(10)]
    cases = [(v, P) for v in (12.0, 25.0) for P in Ps]
    scs = [sc.replace(schedule=type(sc.schedule)(PowerSchedule.constant(P),
                                                 PiecewiseConstant.constant(v), None))
           for v, P in cases]
    results = run_many(scs)
    rel = [abs(steady_state(r, v)[0] - v) / v if not isinstance(r, Exception) else math.inf
           for (v, _), r in zip(cases, results)]
    elapsed = time.perf_counter() - t0
    ok = max(rel) < 0.01 and elapsed < 60.0
    report_criterion(12, ok, f"{sum(r < 0.01 for r in rel)}/{len(rel)} steady outputs within 1% "
                             f"(buck 12 V and boost 25 V, P = 5..27.5 W), max rel error "
                             f"{max(rel):.2e}; {elapsed:.1f} s")
    assert ok


# ---- 14 --------------------------------------------------------------------------------

_VERB_OF = {
    "fig2_gain_sweep": "gain-sweep", "fig4_phase": "phase-plot",
    "fig4_phase_example_design": "phase-plot", "fig5_pi": "pi-compare",
    "fig7_boost_step": "run", "fig8_buck_step": "run",
    "fig9_line_reg": "line-reg", "fig10_load_reg": "load-reg",
}


def test_criterion_14_determinism(tmp_path, report_criterion):
    assert set(_VERB_OF) == set(BUNDLED)
    differing, n_files = [], 0
    for name, verb in _VERB_OF.items():
        dirs = [tmp_path / name / "a", tmp_path / name / "b"]
        for d in dirs:
            main([verb, name, "--out-dir", str(d)])
        files = sorted(f.name for f in dirs[0].iterdir())
        assert files == sorted(f.name for f in dirs[1].iterdir())
        for f in files:
            n_files += 1
            if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes():
                differing.append(f)
    ok = not differing and n_files > 0
    report_criterion(14, ok, f"{n_files} output files from {len(_VERB_OF)} bundled scenarios compared "
                             f"byte-for-byte over two runs; {len(differing)} differ")
    assert ok
