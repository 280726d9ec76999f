"""Fixed-step closed-loop simulation in averaged and switched fidelity.

Averaged mode integrates ``(x1, x2, P_I, PI integral)`` as one ODE with RK4
and evaluates the controller inside every RK stage. Switched mode integrates
the instantaneous topology under trailing-edge PWM, samples low-pass-filtered
measurements at ``f_ctrl`` and holds the duty between samples; the estimator
is advanced by its exact solution over each sample period.

Events (steps in P, E and x2*) snap to the nearest integration step.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from numba import njit

from .control import GainSynthesisError, _adaptive_duty_raw, synthesize_gains
from .estimator import P_HAT_MIN, _derivative, _estimate, _hold_step
from .model import (X2_FLOOR, ConverterParams, Equilibrium, ModelDomainError, PiecewiseConstant,
                    PowerSchedule, State, equilibrium_current, equilibrium_duty)

if TYPE_CHECKING:
    from .scenario import Scenario

CTRL_IDA = 0
CTRL_IDA_KNOWN_P = 1
CTRL_PI = 2

STATUS_OK = 0
STATUS_X2_FLOOR = 1
STATUS_X1_NONPOSITIVE = 2
STATUS_NONFINITE = 3

_STATUS_TEXT = {
    STATUS_X2_FLOOR: f"output voltage fell below the CPL validity floor ({X2_FLOOR} V)",
    STATUS_X1_NONPOSITIVE: "inductor current left the positive half-line (duty law undefined)",
    STATUS_NONFINITE: "state became non-finite",
}

#: Trajectory columns and units, in CSV order.
COLUMNS = (
    ("t", "s"), ("x1", "A"), ("x2", "V"), ("u", "1"), ("u_raw", "1"),
    ("P", "W"), ("P_hat", "W"), ("i_o", "A"), ("power", "W"), ("i_in", "A"),
    ("E", "V"), ("x2_star", "V"),
)
_NCOL = len(COLUMNS)

DEFAULT_DT = {"averaged": 1e-6, "switched": 2.5e-7}


class ModelValidityError(RuntimeError):
    """The state left the region where the ideal averaged/switched model holds."""

    def __init__(self, message, t, state, trajectory=None):
        super().__init__(f"{message} at t={t:.6g} s, state=({state[0]:.6g} A, {state[1]:.6g} V)")
        self.t = t
        self.state = state
        self.trajectory = trajectory


@dataclass(frozen=True)
class SimConfig:
    """Integration and sampling settings.

    ``f_ctrl`` and ``f_lpf`` describe the switched-mode measurement chain
    (sample rate of the controller, cutoff of the first-order filter on the
    controller inputs). ``f_display`` is the cutoff of the filter applied to
    recorded switched-mode signals.
    """

    mode: str = "averaged"
    dt: float | None = None
    t_end: float = 2.0
    f_sw: float = 75e3
    f_ctrl: float = 10e3
    f_lpf: float = 1e3
    f_display: float = 1e3
    record_rate: float = 50e3

    def __post_init__(self):
        if self.mode not in DEFAULT_DT:
            raise ValueError(f"mode must be 'averaged' or 'switched', got {self.mode!r}")
        if self.dt is None:
            object.__setattr__(self, "dt", DEFAULT_DT[self.mode])
        for name in ("dt", "t_end", "f_sw", "f_ctrl", "f_lpf", "f_display", "record_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.mode == "averaged" and self.dt > 1e-5:
            raise ValueError(f"averaged mode needs dt <= 1e-5 s, got {self.dt}")
        if self.mode == "switched" and self.dt > 1.0 / (50.0 * self.f_sw) * (1 + 1e-9):
            raise ValueError(f"switched mode needs dt <= 1/(50 f_sw) = {1 / (50 * self.f_sw):.3g} s")
        if self.f_ctrl > self.f_sw:
            raise ValueError("f_ctrl must not exceed f_sw")
        if self.f_lpf > self.f_ctrl / 2:
            raise ValueError("f_lpf must not exceed f_ctrl / 2")
        ratio = 1.0 / (self.record_rate * self.dt)
        if abs(ratio - round(ratio)) > 1e-6 * ratio or round(ratio) < 1:
            raise ValueError("1/record_rate must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def record_every(self) -> int:
        return int(round(1.0 / (self.record_rate * self.dt)))


@dataclass(frozen=True)
class EventSchedule:
    """Piecewise-constant timelines for load power, input voltage and target voltage."""

    P: PowerSchedule
    x2_star: PiecewiseConstant
    E: PiecewiseConstant | None = None

    def input_voltage(self, params: ConverterParams) -> PiecewiseConstant:
        return self.E if self.E is not None else PiecewiseConstant.constant(params.E)

    def breakpoint_times(self, params: ConverterParams) -> list[float]:
        times = set(self.P.times) | set(self.x2_star.times) | set(self.input_voltage(params).times)
        return sorted(times)

    def operating_points(self, params: ConverterParams) -> list[tuple[float, float, float]]:
        """Distinct ``(P, E, x2*)`` triples visited by the schedule."""
        Es = self.input_voltage(params)
        seen = []
        for t in self.breakpoint_times(params):
            op = (self.P(t), Es(t), self.x2_star(t))
            if op not in seen:
                seen.append(op)
        return seen


@dataclass
class Trajectory:
    """Uniformly sampled record of one run; see :data:`COLUMNS` for the fields."""

    data: np.ndarray
    mode: str = "averaged"
    saturation_events: int = 0
    floor_events: int = 0
    x1_excursions: int = 0
    status: str = "ok"

    def __getattr__(self, name):
        names = [c for c, _ in COLUMNS]
        if name in names:
            return self.data[:, names.index(name)]
        raise AttributeError(name)

    def __len__(self):
        return self.data.shape[0]

    @property
    def P_tilde(self) -> np.ndarray:
        return self.P_hat - self.P

    def window(self, t0: float, t1: float = math.inf) -> np.ndarray:
        return (self.t >= t0 - 1e-12) & (self.t <= t1 + 1e-12)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"{c}[{u}]" for c, u in COLUMNS])
        for row in self.data:
            w.writerow([f"{v:.12g}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# --------------------------------------------------------------------------
# primitives


def rk4_step(f: Callable, y, t: float, dt: float):
    """Classical fourth-order Runge-Kutta step of ``dy/dt = f(t, y)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(y, dtype=float)
    try:
        k1 = np.asarray(f(t, y))
        k2 = np.asarray(f(t + dt / 2, y + dt / 2 * k1))
        k3 = np.asarray(f(t + dt / 2, y + dt / 2 * k2))
        k4 = np.asarray(f(t + dt, y + dt * k3))
    except ModelDomainError as exc:
        raise ModelDomainError(f"at t={t!r}: {exc}") from exc
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def pwm_compare(duty: float, t: float, f_sw: float) -> bool:
    """Trailing-edge PWM: the switch is on while ``frac(t f_sw) < duty``."""
    if not 0.0 <= duty <= 1.0:
        raise ModelDomainError(f"duty ratio must lie in [0, 1], got {duty!r}")
    return _pwm(duty, t, f_sw)


def lowpass_step(state: float, value: float, f_c: float, dt: float) -> float:
    """First-order low-pass update, exact for a zero-order-held input."""
    if not f_c > 0:
        raise ValueError("cutoff must be positive")
    return state + (1.0 - math.exp(-2.0 * math.pi * f_c * dt)) * (value - state)


@njit(cache=True, nogil=True)
def _pwm(duty, t, f_sw):
    ph = t * f_sw
    return ph - math.floor(ph) < duty


# --------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _lookup(idx, vals, i, k):
    while k + 1 < idx.shape[0] and idx[k + 1] <= i:
        k += 1
    return vals[k], k


@njit(cache=True, nogil=True)
def _avg_rhs(y, P, E, x2s, L, C, ctrl, k1, gamma, kp, ki, out):
    x1 = y[0]
    x2 = y[1]
    floored = 0
    P_hat = _estimate(y[2], x2, gamma, C)
    if ctrl == CTRL_PI:
        e = x2s - x2
        raw = kp * e + ki * y[3]
        u = min(max(raw, 0.0), 1.0)
        if raw == u or (raw > 1.0 and e < 0.0) or (raw < 0.0 and e > 0.0):
            out[3] = e
        else:
            out[3] = 0.0
    else:
        Pc = P if ctrl == CTRL_IDA_KNOWN_P else P_hat
        if Pc < P_HAT_MIN:
            Pc = P_HAT_MIN
            floored = 1
        raw = _adaptive_duty_raw(x1, x2, Pc, E, L, C, k1, x2s)
        u = min(max(raw, 0.0), 1.0)
        out[3] = 0.0
    out[0] = (-(1.0 - u) * x2 + u * E) / L
    out[1] = ((1.0 - u) * x1 - P / x2) / C
    out[2] = _derivative(y[2], x1, x2, u, gamma, C)
    return u, raw, P_hat, floored


@njit(cache=True, nogil=True)
def _averaged_kernel(y0, n_steps, dt, rec_every, L, C,
                     P_idx, P_val, E_idx, E_val, X_idx, X_val,
                     ctrl, k1, gamma, kp, ki):
    n_rec = n_steps // rec_every + 1
    rec = np.empty((n_rec, 12))
    y = y0.copy()
    k1v = np.empty(4)
    k2v = np.empty(4)
    k3v = np.empty(4)
    k4v = np.empty(4)
    tmp = np.empty(4)
    kp_ = 0
    ke_ = 0
    kx_ = 0
    j = 0
    n_sat = 0
    n_floor = 0
    n_x1 = 0
    status = 0
    fail = -1
    for i in range(n_steps + 1):
        P, kp_ = _lookup(P_idx, P_val, i, kp_)
        E, ke_ = _lookup(E_idx, E_val, i, ke_)
        x2s, kx_ = _lookup(X_idx, X_val, i, kx_)
        if not (math.isfinite(y[0]) and math.isfinite(y[1])):
            status = 3
            fail = i
            break
        if y[1] <= 0.1:
            status = 1
            fail = i
            break
        if y[0] <= 0.0:
            if ctrl != CTRL_PI:
                status = 2
                fail = i
                break
            n_x1 += 1
        u, raw, P_hat, floored = _avg_rhs(y, P, E, x2s, L, C, ctrl, k1, gamma, kp, ki, k1v)
        if raw != u:
            n_sat += 1
        n_floor += floored
        if i % rec_every == 0:
            io = P / y[1]
            rec[j, 0] = i * dt
            rec[j, 1] = y[0]
            rec[j, 2] = y[1]
            rec[j, 3] = u
            rec[j, 4] = raw
            rec[j, 5] = P
            rec[j, 6] = P_hat
            rec[j, 7] = io
            rec[j, 8] = y[1] * io
            rec[j, 9] = u * y[0]
            rec[j, 10] = E
            rec[j, 11] = x2s
            j += 1
        if i == n_steps:
            break
        for m in range(4):
            tmp[m] = y[m] + 0.5 * dt * k1v[m]
        if tmp[1] <= 0.1:
            status = 1
            fail = i
            break
        _avg_rhs(tmp, P, E, x2s, L, C, ctrl, k1, gamma, kp, ki, k2v)
        for m in range(4):
            tmp[m] = y[m] + 0.5 * dt * k2v[m]
        if tmp[1] <= 0.1:
            status = 1
            fail = i
            break
        _avg_rhs(tmp, P, E, x2s, L, C, ctrl, k1, gamma, kp, ki, k3v)
        for m in range(4):
            tmp[m] = y[m] + dt * k3v[m]
        if tmp[1] <= 0.1:
            status = 1
            fail = i
            break
        _avg_rhs(tmp, P, E, x2s, L, C, ctrl, k1, gamma, kp, ki, k4v)
        for m in range(4):
            y[m] += dt / 6.0 * (k1v[m] + 2.0 * k2v[m] + 2.0 * k3v[m] + k4v[m])
    return rec[:j], status, fail, y, n_sat, n_floor, n_x1


@njit(cache=True, nogil=True)
def _switched_kernel(y0, n_steps, dt, rec_every, L, C,
                     P_idx, P_val, E_idx, E_val, X_idx, X_val,
                     ctrl, k1, gamma, kp, ki, f_sw, f_ctrl, f_lpf, f_disp):
    n_rec = n_steps // rec_every + 1
    rec = np.empty((n_rec, 12))
    x1 = y0[0]
    x2 = y0[1]
    P_I = y0[2]
    I = y0[3]
    a_c = 1.0 - math.exp(-2.0 * math.pi * f_lpf * dt)
    a_d = 1.0 - math.exp(-2.0 * math.pi * f_disp * dt)
    Ts = 1.0 / f_ctrl
    kp_ = 0
    ke_ = 0
    kx_ = 0
    P0, kp_ = _lookup(P_idx, P_val, 0, kp_)
    io0 = P0 / x2
    c1 = x1
    c2 = x2
    d1 = x1
    d2 = x2
    do = io0
    u = 0.0
    raw = 0.0
    din = 0.0
    P_hat = _estimate(P_I, c2, gamma, C)
    n_tick = 0
    j = 0
    n_sat = 0
    n_floor = 0
    n_x1 = 0
    status = 0
    fail = -1
    first = True
    for i in range(n_steps + 1):
        t = i * dt
        P, kp_ = _lookup(P_idx, P_val, i, kp_)
        E, ke_ = _lookup(E_idx, E_val, i, ke_)
        x2s, kx_ = _lookup(X_idx, X_val, i, kx_)
        if not (math.isfinite(x1) and math.isfinite(x2)):
            status = 3
            fail = i
            break
        if x2 <= 0.1:
            status = 1
            fail = i
            break
        if x1 <= 0.0:
            n_x1 += 1
        if t >= n_tick * Ts - 0.5 * dt:
            n_tick += 1
            P_hat = _estimate(P_I, c2, gamma, C)
            if ctrl == CTRL_PI:
                e = x2s - c2
                trial = I + e * Ts
                raw = kp * e + ki * trial
                if (0.0 <= raw <= 1.0) or (raw > 1.0 and e < 0.0) or (raw < 0.0 and e > 0.0):
                    I = trial
                else:
                    raw = kp * e + ki * I
            else:
                if c1 <= 0.0:
                    status = 2
                    fail = i
                    break
                Pc = P if ctrl == CTRL_IDA_KNOWN_P else P_hat
                if Pc < P_HAT_MIN:
                    Pc = P_HAT_MIN
                    n_floor += 1
                raw = _adaptive_duty_raw(c1, c2, Pc, E, L, C, k1, x2s)
            u = min(max(raw, 0.0), 1.0)
            if raw != u:
                n_sat += 1
            P_I = _hold_step(P_I, c1, c2, u, gamma, C, Ts)
            if first:
                din = u * x1
                first = False
        if i % rec_every == 0:
            rec[j, 0] = t
            rec[j, 1] = d1
            rec[j, 2] = d2
            rec[j, 3] = u
            rec[j, 4] = raw
            rec[j, 5] = P
            rec[j, 6] = P_hat
            rec[j, 7] = do
            rec[j, 8] = d2 * do
            rec[j, 9] = din
            rec[j, 10] = E
            rec[j, 11] = x2s
            j += 1
        if i == n_steps:
            break
        s = 1.0 if _pwm(u, t, f_sw) else 0.0
        ka1 = (-(1.0 - s) * x2 + s * E) / L
        kb1 = ((1.0 - s) * x1 - P / x2) / C
        xa = x1 + 0.5 * dt * ka1
        xb = x2 + 0.5 * dt * kb1
        ka2 = (-(1.0 - s) * xb + s * E) / L
        kb2 = ((1.0 - s) * xa - P / xb) / C
        xa = x1 + 0.5 * dt * ka2
        xb = x2 + 0.5 * dt * kb2
        ka3 = (-(1.0 - s) * xb + s * E) / L
        kb3 = ((1.0 - s) * xa - P / xb) / C
        xa = x1 + dt * ka3
        xb = x2 + dt * kb3
        ka4 = (-(1.0 - s) * xb + s * E) / L
        kb4 = ((1.0 - s) * xa - P / xb) / C
        i_in = s * x1
        x1 += dt / 6.0 * (ka1 + 2.0 * ka2 + 2.0 * ka3 + ka4)
        x2 += dt / 6.0 * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4)
        io = P / x2
        c1 += a_c * (x1 - c1)
        c2 += a_c * (x2 - c2)
        d1 += a_d * (x1 - d1)
        d2 += a_d * (x2 - d2)
        do += a_d * (io - do)
        din += a_d * (i_in - din)
    yend = np.array([x1, x2, P_I, I])
    return rec[:j], status, fail, yend, n_sat, n_floor, n_x1


# --------------------------------------------------------------------------
# drivers


def _timeline_arrays(tl: PiecewiseConstant, dt: float):
    idx = np.array([int(round(t / dt)) for t in tl.times], dtype=np.int64)
    return idx, tl.values.astype(float)


def _controller_code(sc: "Scenario") -> int:
    if sc.controller == "pi":
        return CTRL_PI
    return CTRL_IDA_KNOWN_P if sc.estimator_bypass else CTRL_IDA


def certify_schedule(sc: "Scenario") -> list:
    """Synthesize gains at every operating point the schedule visits.

    Raises :class:`GainSynthesisError` if the scenario's ``k1`` does not
    certify all of them.
    """
    out = []
    if sc.controller == "pi":
        return out
    for P, E, x2s in sc.schedule.operating_points(sc.params):
        p = sc.params.with_E(E)
        eq = Equilibrium.from_voltage(x2s, P, E)
        g = synthesize_gains(eq, P, p, k1_seed=sc.k1, safety_margin=sc.safety_margin)
        if g.k1 != sc.k1:
            raise GainSynthesisError(
                f"k1={sc.k1} is not certified at (P={P}, E={E}, x2*={x2s}); needs k1 > {g.k1 / 1.01}")
        out.append(g)
    return out


def initial_conditions(sc: "Scenario") -> np.ndarray:
    """``[x1, x2, P_I, PI integral]`` at ``t = 0`` for a scenario."""
    E0 = sc.schedule.input_voltage(sc.params)(0.0)
    P0 = sc.schedule.P(0.0)
    x2s0 = sc.schedule.x2_star(0.0)
    if sc.x0 is not None:
        x1, x2 = sc.x0.x1, sc.x0.x2
    else:
        x1, x2 = equilibrium_current(x2s0, P0, E0), x2s0
    P_hat_0 = P0 + sc.P_hat_error
    if not P_hat_0 > 0:
        raise ModelDomainError(f"initial estimate P(0) + error must be positive, got {P_hat_0}")
    P_I = P_hat_0 + 0.5 * sc.gamma * sc.params.C * x2 ** 2
    integral = equilibrium_duty(x2s0, E0) / sc.ki if (sc.controller == "pi" and sc.ki > 0) else 0.0
    return np.array([x1, x2, P_I, integral], dtype=float)


def simulate(sc: "Scenario", check_gains: bool = True) -> Trajectory:
    """Run a scenario in the fidelity named by ``sc.sim.mode``."""
    if check_gains:
        certify_schedule(sc)
    cfg = sc.sim
    y0 = initial_conditions(sc)
    if not (y0[0] > 0 and y0[1] > X2_FLOOR):
        raise ModelDomainError(f"initial state ({y0[0]}, {y0[1]}) is outside the model domain")
    P_idx, P_val = _timeline_arrays(sc.schedule.P, cfg.dt)
    E_idx, E_val = _timeline_arrays(sc.schedule.input_voltage(sc.params), cfg.dt)
    X_idx, X_val = _timeline_arrays(sc.schedule.x2_star, cfg.dt)
    common = (y0, cfg.n_steps, cfg.dt, cfg.record_every, sc.params.L, sc.params.C,
              P_idx, P_val, E_idx, E_val, X_idx, X_val,
              _controller_code(sc), float(sc.k1), float(sc.gamma), float(sc.kp), float(sc.ki))
    if cfg.mode == "averaged":
        rec, status, fail, yend, n_sat, n_floor, n_x1 = _averaged_kernel(*common)
    else:
        rec, status, fail, yend, n_sat, n_floor, n_x1 = _switched_kernel(
            *common, cfg.f_sw, cfg.f_ctrl, cfg.f_lpf, cfg.f_display)
    traj = Trajectory(np.ascontiguousarray(rec), cfg.mode, int(n_sat), int(n_floor), int(n_x1))
    if status != STATUS_OK:
        traj.status = _STATUS_TEXT[status]
        raise ModelValidityError(_STATUS_TEXT[status], fail * cfg.dt, (yend[0], yend[1]), traj)
    return traj


def simulate_averaged(sc: "Scenario", **kw) -> Trajectory:
    if sc.sim.mode != "averaged":
        sc = sc.replace_sim(mode="averaged", dt=None)
    return simulate(sc, **kw)


def simulate_switched(sc: "Scenario", **kw) -> Trajectory:
    if sc.sim.mode != "switched":
        sc = sc.replace_sim(mode="switched", dt=None)
    return simulate(sc, **kw)


def run_many(scenarios: Sequence["Scenario"], workers: int | None = None,
             fn: Callable = simulate) -> list:
    """Run scenarios concurrently; results come back in input order.

    Exceptions are returned in place of the failed run's result.
    """
    def one(sc):
        try:
            return fn(sc)
        except (ModelValidityError, GainSynthesisError, ModelDomainError) as exc:
            return exc

    workers = workers or min(len(scenarios), os.cpu_count() or 1) or 1
    if workers == 1:
        return [one(sc) for sc in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, scenarios))


def settle_time(t: np.ndarray, x: np.ndarray, target: float, band: float, t0: float) -> float:
    """Time after ``t0`` of the last sample outside ``|x - target| <= band`` (0 if none)."""
    sel = t >= t0
    outside = np.nonzero(np.abs(x[sel] - target) > band)[0]
    if outside.size == 0:
        return 0.0
    return float(t[sel][outside[-1]] - t0)
