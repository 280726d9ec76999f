"""Command-line front end: ``idapbc-cpl <verb> [scenario] [options]``."""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import svgplot
from .certify import fit_decay_rates, locate_secondary_equilibrium, run_all
from .control import GainSynthesisError, gains_for
from .model import Equilibrium, ModelDomainError, PiecewiseConstant, PowerSchedule, State, equilibrium_current
from .scenario import BUNDLED, Scenario, ScenarioError, resolve
from .sim import COLUMNS, ModelValidityError, Trajectory, run_many, settle_time, simulate

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

CSV_SCHEMAS = """\
CSV schemas (first row is the header, units in brackets):
  run           <name>_traj.csv, one per fidelity (<name>_<mode>_traj.csv for extra modes):
                  {traj}
  gain-sweep    <name>_<param>_sweep.csv (long format):
                  gain[1], t[s], x1[A], x2[V], P_hat[W]
                <name>_<param>_summary.csv:
                  gain[1], recovery_1pct[s], recovery_0.1pct[s], max_dev[V], decay_rate[1/s]
  phase-plot    <name>_phase_x2_<x2(0)>.csv: t[s], x1[A], x2[V]
                <name>_phase_summary.csv:
                  x2_0[V], x1_0[A], x1_max[A], x1_end[A], x2_end[V], converged
  pi-compare    <name>_pi_compare.csv: t[s], x2_ida[V], x2_pi[V], u_ida[1], u_pi[1]
  line-reg      <name>_line_reg.csv: E[V], region, x2_ss[V], error[V], ripple[V], P_hat_ss[W], settled
  load-reg      <name>_load_reg.csv:
                  x2_star[V], P[W], x2_ss[V], error[V], ripple[V], P_hat_ss[W], P_hat_err[1], settled
  certify       <name>_cert.txt and <name>_cert.json
""".format(traj=", ".join(f"{c}[{u}]" for c, u in COLUMNS))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def _apply_overrides(sc: Scenario, args) -> Scenario:
    kw = {}
    if args.dt is not None:
        kw["dt"] = args.dt
    if args.t_end is not None:
        kw["t_end"] = args.t_end
    if kw:
        try:
            sc = sc.replace_sim(**kw)
        except ValueError as exc:
            raise ScenarioError(str(exc), "sim") from None
    if args.seed is not None:
        sc = sc.replace(seed=args.seed)
    return sc


def _with_mode(sc: Scenario, mode: str, args) -> Scenario:
    if mode == sc.sim.mode:
        return sc
    try:
        return sc.replace_sim(mode=mode, dt=args.dt)
    except ValueError as exc:
        raise ScenarioError(str(exc), "sim") from None


def _step_time(sc: Scenario) -> float:
    times = sc.schedule.P.times
    return float(times[1]) if len(times) > 1 else 0.0


def steady_state(traj: Trajectory, x2_star: float, frac: float = 0.1, tol: float = 1e-3):
    """Mean ``x2`` and ``P_hat`` over the last ``frac`` of the run.

    The run counts as settled when ``x2`` stays within ``tol * x2_star`` of
    its window mean.
    """
    n = max(1, int(round(frac * len(traj))))
    x2 = traj.x2[-n:]
    mean = float(x2.mean())
    ripple = float(np.abs(x2 - mean).max())
    return mean, ripple, ripple < tol * x2_star, float(traj.P_hat[-n:].mean())


def _trajectory_panels(trajs: dict, sc: Scenario) -> list:
    x2s = sc.schedule.x2_star(0.0)
    p1 = svgplot.Plot(title=sc.description or sc.name, xlabel="t [s]", ylabel="x2 [V]")
    p2 = svgplot.Plot(xlabel="t [s]", ylabel="x1 [A]")
    p3 = svgplot.Plot(xlabel="t [s]", ylabel="power [W]")
    p4 = svgplot.Plot(xlabel="t [s]", ylabel="duty u [1]")
    for label, tr in trajs.items():
        p1.line(tr.t, tr.x2, label)
        p2.line(tr.t, tr.x1, label)
        p3.line(tr.t, tr.power, f"x2*i_o ({label})")
        p3.line(tr.t, tr.P_hat, f"P_hat ({label})")
        p4.line(tr.t, tr.u, label)
    p1.hline(x2s)
    return [p1, p2, p3, p4]


# --------------------------------------------------------------------------
# verbs


def cmd_run(sc: Scenario, args, out: Path) -> int:
    modes = sc.sweep.get("modes", [sc.sim.mode])
    scs = [_with_mode(sc, m, args) for m in modes]
    results = run_many(scs, args.workers)
    status = EXIT_OK
    trajs = {}
    x2s = sc.schedule.x2_star(sc.sim.t_end)
    for i, (mode, res) in enumerate(zip(modes, results)):
        if isinstance(res, GainSynthesisError):
            raise res
        if isinstance(res, ModelDomainError) and not isinstance(res, ModelValidityError):
            raise ScenarioError(str(res))
        fname = f"{sc.name}_traj.csv" if i == 0 else f"{sc.name}_{mode}_traj.csv"
        if isinstance(res, ModelValidityError):
            print(f"{mode}: model validity abort: {res}", file=sys.stderr)
            res.trajectory.to_csv(out / fname)
            trajs[mode] = res.trajectory
            status = EXIT_CHECK
            continue
        res.to_csv(out / fname)
        trajs[mode] = res
        mean, ripple, settled, p_hat = steady_state(res, x2s)
        print(f"{mode}: wrote {fname}; final-window x2 = {mean:.6g} V "
              f"(error {mean - x2s:+.4g} V), P_hat = {p_hat:.6g} W, "
              f"saturated samples = {res.saturation_events}")
    if len(trajs) > 1 and all(isinstance(r, Trajectory) for r in results):
        a, b = results[0], results[1]
        t_step = _step_time(sc)
        t_step = t_step if t_step < sc.sim.t_end else 0.0
        t0 = t_step + 0.5 * (sc.sim.t_end - t_step)
        w = a.window(t0)
        n = min(w.sum(), b.window(t0).sum())
        if n:
            disc = float(np.abs(a.x2[w][:n] - b.x2[b.window(t0)][:n]).max())
            print(f"fidelity discrepancy (filtered x2, t >= {t0:g} s): {disc:.4g} V")
    svgplot.save(_trajectory_panels(trajs, sc), out / f"{sc.name}.svg")
    return status


def cmd_gain_sweep(sc: Scenario, args, out: Path) -> int:
    params = [args.param] if args.param else [k for k in ("k1", "gamma") if k in sc.sweep]
    if not params:
        raise ScenarioError("no sweep list: add sweep.k1 or sweep.gamma, or pass --param/--values")
    t_step = _step_time(sc)
    x2s = sc.schedule.x2_star(sc.sim.t_end)
    status = EXIT_OK
    for name in params:
        values = args.values if args.values else sc.sweep.get(name)
        if not values:
            raise ScenarioError(f"no values for {name}", f"sweep.{name}")
        scs = [sc.replace(**{name: float(v)}) for v in values]
        results = run_many(scs, args.workers)
        rows, summary = [], []
        plot = svgplot.Plot(title=f"{sc.name}: {name} sweep", xlabel="t [s]", ylabel="x2 [V]")
        plot_p = svgplot.Plot(xlabel="t [s]", ylabel="P_hat [W]")
        for v, res in zip(values, results):
            if isinstance(res, GainSynthesisError):
                raise res
            if isinstance(res, Exception):
                print(f"{name}={v}: {res}", file=sys.stderr)
                status = EXIT_CHECK
                continue
            rows.extend((float(v), *r) for r in zip(res.t, res.x1, res.x2, res.P_hat))
            rates = fit_decay_rates(res.t, res.P_hat - res.P, res.P)
            post = [r for t0, r in rates if t0 >= t_step - 1e-12]
            rec1 = settle_time(res.t, res.x2, x2s, 0.01 * x2s, t_step)
            rec01 = settle_time(res.t, res.x2, x2s, 0.001 * x2s, t_step)
            dev = float(np.abs(res.x2[res.window(t_step)] - x2s).max())
            summary.append((float(v), rec1, rec01, dev, post[0] if post else math.nan))
            plot.line(res.t, res.x2, f"{name}={v:g}")
            plot_p.line(res.t, res.P_hat, f"{name}={v:g}")
        _write_csv(out / f"{sc.name}_{name}_sweep.csv", ["gain[1]", "t[s]", "x1[A]", "x2[V]", "P_hat[W]"], rows)
        _write_csv(out / f"{sc.name}_{name}_summary.csv",
                   ["gain[1]", "recovery_1pct[s]", "recovery_0.1pct[s]", "max_dev[V]", "decay_rate[1/s]"],
                   summary)
        svgplot.save([plot, plot_p], out / f"{sc.name}_{name}_sweep.svg")
        print(f"{name} sweep:")
        for v, r1, r01, dev, rate in summary:
            print(f"  {name}={v:<8g} recovery(1%)={r1:.4f} s  recovery(0.1%)={r01:.4f} s  "
                  f"max|x2-x2*|={dev:.4f} V  estimator rate={rate:.3f} 1/s")
    return status


def phase_scenarios(sc: Scenario, x2_0s) -> list[Scenario]:
    """Known-load runs from equilibrium-consistent initial points ``x1(0) = P (1/x2(0) + 1/E)``."""
    P = sc.schedule.P(0.0)
    E = sc.schedule.input_voltage(sc.params)(0.0)
    return [sc.replace(estimator_bypass=True, P_hat_error=0.0,
                       x0=State(equilibrium_current(v, P, E), float(v))) for v in x2_0s]


def cmd_phase_plot(sc: Scenario, args, out: Path) -> int:
    x2_0s = args.values or sc.sweep.get("x2_0")
    if not x2_0s:
        raise ScenarioError("no initial voltages: add sweep.x2_0 or pass --values", "sweep.x2_0")
    P = sc.schedule.P(0.0)
    x2s = sc.schedule.x2_star(0.0)
    E = sc.schedule.input_voltage(sc.params)(0.0)
    eq = Equilibrium.from_voltage(x2s, P, E)
    results = run_many(phase_scenarios(sc, x2_0s), args.workers)
    plot = svgplot.Plot(title=sc.description or sc.name, xlabel="x1 [A]", ylabel="x2 [V]")
    summary = []
    status = EXIT_OK
    for v, res in zip(x2_0s, results):
        if isinstance(res, GainSynthesisError):
            raise res
        tr = res.trajectory if isinstance(res, ModelValidityError) else res
        if isinstance(res, Exception):
            print(f"x2(0)={v}: {res}", file=sys.stderr)
        _write_csv(out / f"{sc.name}_phase_x2_{v:g}.csv", ["t[s]", "x1[A]", "x2[V]"],
                   zip(tr.t, tr.x1, tr.x2))
        conv = (not isinstance(res, Exception)
                and abs(tr.x1[-1] - eq.x1_star) <= 1e-3 * eq.x1_star
                and abs(tr.x2[-1] - eq.x2_star) <= 1e-3 * eq.x2_star)
        status = status if conv else EXIT_CHECK
        summary.append((float(v), float(tr.x1[0]), float(tr.x1.max()), float(tr.x1[-1]),
                        float(tr.x2[-1]), "yes" if conv else "no"))
        plot.line(tr.x1, tr.x2, f"x2(0)={v:g}")
        plot.marker(tr.x1[0], tr.x2[0])
    plot.marker(eq.x1_star, eq.x2_star, "x*", shape="cross", color="#d62728")
    g = gains_for(x2s, P, sc.params.with_E(E), sc.k1, sc.safety_margin)
    saddle = locate_secondary_equilibrium(g, P, sc.params.with_E(E))
    if saddle is not None:
        plot.marker(*saddle.state, saddle.kind, shape="cross", color="#9467bd")
        print(f"secondary equilibrium ({saddle.kind}) at x1={saddle.state[0]:.6g} A, x2={saddle.state[1]:.6g} V")
    _write_csv(out / f"{sc.name}_phase_summary.csv",
               ["x2_0[V]", "x1_0[A]", "x1_max[A]", "x1_end[A]", "x2_end[V]", "converged"], summary)
    svgplot.save(plot, out / f"{sc.name}_phase.svg")
    for row in summary:
        print("  x2(0)={:<5g} x1(0)={:.4f} max x1={:.4f} end=({:.6f}, {:.6f}) converged={}".format(*row))
    return status


def cmd_pi_compare(sc: Scenario, args, out: Path) -> int:
    t_step = _step_time(sc)
    x2s = sc.schedule.x2_star(0.0)
    ida, pi = run_many([sc.replace(controller="ida-pbc"), sc.replace(controller="pi")], args.workers)
    for r in (ida, pi):
        if isinstance(r, GainSynthesisError):
            raise r
    tr_ida = ida.trajectory if isinstance(ida, ModelValidityError) else ida
    tr_pi = pi.trajectory if isinstance(pi, ModelValidityError) else pi
    n = len(tr_ida)
    x2_pi = np.full(n, np.nan)
    u_pi = np.full(n, np.nan)
    x2_pi[:len(tr_pi)] = tr_pi.x2[:n]
    u_pi[:len(tr_pi)] = tr_pi.u[:n]
    _write_csv(out / f"{sc.name}_pi_compare.csv",
               ["t[s]", "x2_ida[V]", "x2_pi[V]", "u_ida[1]", "u_pi[1]"],
               zip(tr_ida.t, tr_ida.x2, x2_pi, tr_ida.u, u_pi))
    plot = svgplot.Plot(title=sc.description or sc.name, xlabel="t [s]", ylabel="x2 [V]")
    plot.line(tr_ida.t, tr_ida.x2, "IDA-PBC")
    plot.line(tr_pi.t, tr_pi.x2, "PI")
    plot.hline(x2s)
    plot.vline(t_step, "step")
    svgplot.save(plot, out / f"{sc.name}.svg")

    status = EXIT_OK
    if isinstance(ida, Exception):
        print(f"IDA-PBC run aborted: {ida}")
        status = EXIT_CHECK
    else:
        rec = settle_time(ida.t, ida.x2, x2s, 0.01 * x2s, t_step)
        ok = rec < 0.3
        print(f"IDA-PBC: back inside the 1% band {rec * 1e3:.1f} ms after the step "
              f"({'ok' if ok else 'too slow'}, limit 300 ms)")
        status = status if ok else EXIT_CHECK
    t_check = t_step + 8.0
    if isinstance(pi, Exception):
        print(f"PI: run aborted before t = {t_check:g} s: {pi}")
        status = EXIT_CHECK
    elif pi.t[-1] < t_check:
        print(f"PI: run ends before t = {t_check:g} s; extend t_end")
        status = EXIT_CHECK
    else:
        dev = float(np.abs(pi.x2[pi.window(t_check)] - x2s).max())
        print(f"PI: peak |x2 - x2*| after t = {t_check:g} s is {dev:.4g} V")
        status = status if dev > 0.1 else EXIT_CHECK
    return status


def _regulation_rows(scs, results, x2s_of, key_of):
    rows, status = [], EXIT_OK
    for sc_i, res in zip(scs, results):
        if isinstance(res, GainSynthesisError):
            raise res
        x2s = x2s_of(sc_i)
        if isinstance(res, Exception):
            print(f"{key_of(sc_i)}: {res}", file=sys.stderr)
            rows.append((sc_i, math.nan, math.nan, math.nan, math.nan, False))
            status = EXIT_CHECK
            continue
        mean, ripple, settled, p_hat = steady_state(res, x2s)
        err = mean - x2s
        if not (settled and abs(err) < 0.01 * x2s):
            status = EXIT_CHECK
        rows.append((sc_i, mean, err, ripple, p_hat, settled))
    return rows, status


def cmd_line_reg(sc: Scenario, args, out: Path) -> int:
    Es = args.values or sc.sweep.get("E")
    if not Es:
        raise ScenarioError("no input voltages: add sweep.E or pass --values", "sweep.E")
    x2s = sc.schedule.x2_star(0.0)
    scs = [sc.replace(schedule=type(sc.schedule)(sc.schedule.P, sc.schedule.x2_star,
                                                 PiecewiseConstant.constant(float(E))))
           for E in Es]
    rows, status = _regulation_rows(scs, run_many(scs, args.workers), lambda s: x2s,
                                    lambda s: f"E={s.schedule.E(0.0):g}")
    table = []
    for (s, mean, err, ripple, p_hat, settled), E in zip(rows, Es):
        region = "boost" if E < x2s else ("buck" if E > x2s else "unity")
        table.append((float(E), region, mean, err, ripple, p_hat, "yes" if settled else "not settled"))
    _write_csv(out / f"{sc.name}_line_reg.csv",
               ["E[V]", "region", "x2_ss[V]", "error[V]", "ripple[V]", "P_hat_ss[W]", "settled"], table)
    plot = svgplot.Plot(title=sc.description or sc.name, xlabel="E [V]", ylabel="steady x2 [V]")
    plot.line([r[0] for r in table], [r[2] for r in table], "x2 steady")
    for r in table:
        plot.marker(r[0], r[2])
    plot.hline(x2s)
    plot.vline(x2s, "boost | buck")
    svgplot.save(plot, out / f"{sc.name}_line_reg.svg")
    for r in table:
        print("  E={:<5g} {:<6} x2={:.6f} V error={:+.2e} V ripple={:.1e} V P_hat={:.4f} W {}".format(*r))
    return status


def cmd_load_reg(sc: Scenario, args, out: Path) -> int:
    Ps = args.values or sc.sweep.get("P")
    if not Ps:
        raise ScenarioError("no load powers: add sweep.P or pass --values", "sweep.P")
    targets = sc.sweep.get("x2_star", [sc.schedule.x2_star(0.0)])
    scs = [sc.replace(schedule=type(sc.schedule)(PowerSchedule.constant(float(P)),
                                                 PiecewiseConstant.constant(float(v)), sc.schedule.E))
           for v in targets for P in Ps]
    rows, status = _regulation_rows(scs, run_many(scs, args.workers),
                                    lambda s: s.schedule.x2_star(0.0),
                                    lambda s: f"x2*={s.schedule.x2_star(0.0):g}, P={s.schedule.P(0.0):g}")
    table = []
    for s, mean, err, ripple, p_hat, settled in rows:
        P = s.schedule.P(0.0)
        p_err = (p_hat - P) / P
        if not abs(p_err) < 0.005:
            status = EXIT_CHECK
        table.append((s.schedule.x2_star(0.0), P, mean, err, ripple, p_hat, p_err,
                      "yes" if settled else "not settled"))
    _write_csv(out / f"{sc.name}_load_reg.csv",
               ["x2_star[V]", "P[W]", "x2_ss[V]", "error[V]", "ripple[V]", "P_hat_ss[W]",
                "P_hat_err[1]", "settled"], table)
    panels = []
    for v in targets:
        sub = [r for r in table if r[0] == v]
        plot = svgplot.Plot(title=f"x2* = {v:g} V", xlabel="P [W]", ylabel="steady x2 [V]")
        plot.line([r[1] for r in sub], [r[2] for r in sub], "x2 steady")
        for r in sub:
            plot.marker(r[1], r[2])
        plot.hline(v)
        panels.append(plot)
    svgplot.save(panels, out / f"{sc.name}_load_reg.svg")
    for r in table:
        print("  x2*={:<4g} P={:<5g} x2={:.6f} V error={:+.2e} V ripple={:.1e} V "
              "P_hat={:.4f} W ({:+.1e}) {}".format(*r))
    return status


def cmd_certify(sc: Scenario, args, out: Path) -> int:
    if sc.controller != "ida-pbc":
        raise ScenarioError("certify needs an ida-pbc scenario", "controller.kind")
    P = sc.schedule.P(0.0)
    E = sc.schedule.input_voltage(sc.params)(0.0)
    x2s = sc.schedule.x2_star(0.0)
    # estimator check: a run with a visible initial error
    err = sc.P_hat_error if sc.P_hat_error else -0.5 * P
    est = sc.replace(P_hat_error=err, estimator_bypass=False).replace_sim(mode="averaged", dt=None)
    try:
        traj = simulate(est)
    except ModelValidityError as exc:
        traj = exc.trajectory
    rep = run_all(x2s, P, sc.params.with_E(E), sc.k1, sc.safety_margin, seed=sc.seed,
                  k2_perturb=args.k2_perturb, estimator_traj=traj, gamma=sc.gamma)
    text = rep.to_text()
    (out / f"{sc.name}_cert.txt").write_text(text)
    (out / f"{sc.name}_cert.json").write_text(rep.to_json() + "\n")
    print(text, end="")
    return EXIT_OK if rep.passed else EXIT_CHECK


VERBS = {
    "run": (cmd_run, None, "simulate one scenario (every fidelity listed in sweep.modes)"),
    "gain-sweep": (cmd_gain_sweep, "fig2_gain_sweep", "sweep k1 and/or gamma over a load step"),
    "phase-plot": (cmd_phase_plot, "fig4_phase", "known-load trajectories from a range of x2(0)"),
    "pi-compare": (cmd_pi_compare, "fig5_pi", "IDA-PBC against the PI baseline on one load step"),
    "line-reg": (cmd_line_reg, "fig9_line_reg", "steady output over a sweep of input voltages"),
    "load-reg": (cmd_load_reg, "fig10_load_reg", "steady output over a sweep of load powers"),
    "certify": (cmd_certify, "fig7_boost_step", "stability certificates at the scenario's operating point"),
}


def _add_globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # sub-commands must not reset values given before the verb
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(None),
                   help="seed of the quasi-random sampling used by certificates (default: scenario seed)")
    g.add_argument("--out-dir", type=Path, default=d(None), help="output directory (default: current)")
    g.add_argument("--dt", type=float, default=d(None), help="integration step override [s]")
    g.add_argument("--t-end", type=float, default=d(None), help="simulated time override [s]")
    g.add_argument("--workers", type=int, default=d(None), help="parallel runs for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idapbc-cpl",
        description="Adaptive IDA-PBC for a buck-boost converter feeding a constant power load.",
        epilog=CSV_SCHEMAS + "\nbundled scenarios: " + ", ".join(BUNDLED)
               + "\nexit codes: 0 success, 1 check failure, 2 configuration error",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", metavar="verb", required=True)
    for verb, (_, default, helptext) in VERBS.items():
        sp = sub.add_parser(verb, help=helptext, description=helptext,
                            epilog=CSV_SCHEMAS, formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_globals(sp, suppress=True)
        if default is None:
            sp.add_argument("scenario", help="scenario file or bundled scenario name")
        else:
            sp.add_argument("scenario", nargs="?", default=default,
                            help=f"scenario file or bundled scenario name (default: {default})")
        if verb == "gain-sweep":
            sp.add_argument("--param", choices=("k1", "gamma"), default=None)
            sp.add_argument("--values", type=float, nargs="+", default=None)
        elif verb in ("phase-plot", "line-reg", "load-reg"):
            sp.add_argument("--values", type=float, nargs="+", default=None,
                            help="override the sweep list (x2(0), E or P respectively)")
        elif verb == "certify":
            sp.add_argument("--k2-perturb", type=float, default=0.0,
                            help="relative perturbation applied to k2 before checking (fault injection)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb == "gain-sweep" and args.values and not args.param:
        parser.error("--values needs --param")
    out = args.out_dir or Path.cwd()
    try:
        out.mkdir(parents=True, exist_ok=True)
        sc = _apply_overrides(resolve(args.scenario), args)
        return VERBS[args.verb][0](sc, args, out)
    except (ScenarioError, GainSynthesisError, ModelDomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
