import math

import numpy as np
import pytest

from idapbc_cpl.control import gains_for, hd
from idapbc_cpl.model import ModelDomainError, PowerSchedule, State
from idapbc_cpl.scenario import load_bundled
from idapbc_cpl.sim import (COLUMNS, ModelValidityError, SimConfig, certify_schedule,
                            lowpass_step, pwm_compare, rk4_step, run_many, settle_time, simulate)


@pytest.fixture(scope="module")
def fig7():
    return load_bundled("fig7_boost_step")


def constant_load(sc, P, t_end):
    return sc.replace(schedule=sc.schedule.__class__(PowerSchedule([(0.0, P)]), sc.schedule.x2_star,
                                                     sc.schedule.E)).replace_sim(t_end=t_end)


# ---- primitives ----------------------------------------------------------------


def test_rk4_single_step_value():
    y = rk4_step(lambda t, y: -y, [1.0], 0.0, 0.1)
    assert y[0] == pytest.approx(1 - 0.1 + 0.1 ** 2 / 2 - 0.1 ** 3 / 6 + 0.1 ** 4 / 24, rel=1e-15)
    assert y[0] == pytest.approx(0.9048375, abs=1e-7)


def test_rk4_is_fourth_order():
    def solve(h):
        y, t = np.array([1.0, 0.0]), 0.0
        for _ in range(int(round(1.0 / h))):
            y = rk4_step(lambda t, y: np.array([y[1], -y[0]]), y, t, h)
            t += h
        return abs(y[0] - math.cos(1.0))
    assert solve(0.02) / solve(0.01) == pytest.approx(16.0, rel=0.05)


def test_rk4_propagates_domain_errors_with_time():
    def f(t, y):
        raise ModelDomainError("boom")
    with pytest.raises(ModelDomainError, match="t=0.5"):
        rk4_step(f, [1.0], 0.5, 0.1)


@pytest.mark.parametrize("duty,phase,on", [(0.3, 0.0, True), (0.3, 0.29, True), (0.3, 0.31, False),
                                           (0.0, 0.0, False), (1.0, 0.99, True)])
def test_pwm_trailing_edge(duty, phase, on):
    f = 75e3
    assert pwm_compare(duty, (7 + phase) / f, f) is on


def test_pwm_rejects_invalid_duty():
    with pytest.raises(ModelDomainError):
        pwm_compare(1.2, 0.0, 75e3)


def test_lowpass_step_response_time_constant():
    f_c, dt = 1e3, 1e-7
    tau = 1 / (2 * math.pi * f_c)
    y = 0.0
    for _ in range(int(round(tau / dt))):
        y = lowpass_step(y, 1.0, f_c, dt)
    assert y == pytest.approx(1 - math.exp(-1), abs=1e-3)


@pytest.mark.parametrize("kw", [
    {"mode": "hybrid"},
    {"mode": "averaged", "dt": 2e-5},
    {"mode": "switched", "dt": 1e-6},
    {"mode": "averaged", "t_end": -1.0},
    {"mode": "switched", "f_ctrl": 100e3},
    {"mode": "switched", "f_lpf": 6e3},
    {"mode": "averaged", "dt": 3e-6, "record_rate": 50e3},
])
def test_sim_config_rejects(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_sim_config_defaults():
    assert SimConfig("averaged").dt == 1e-6
    assert SimConfig("switched").dt == 2.5e-7
    assert SimConfig("averaged", t_end=2.0).record_every == 20


# ---- averaged runs ---------------------------------------------------------------


def test_equilibrium_is_invariant(fig7):
    traj = simulate(constant_load(fig7, 30.0, 1.0))
    assert np.max(np.abs(traj.x2 - 25.0)) < 1e-6
    assert np.max(np.abs(traj.x1 - 3.2)) < 1e-6
    assert traj.saturation_events == 0


def test_runs_are_deterministic(fig7):
    sc = fig7.replace_sim(t_end=1.2)
    a, b = simulate(sc), simulate(sc)
    assert a.to_csv() == b.to_csv()


def test_events_snap_to_the_grid(fig7):
    traj = simulate(fig7.replace_sim(t_end=1.01))
    i = np.searchsorted(traj.t, 1.0)
    assert traj.t[i] == pytest.approx(1.0, abs=1e-12)
    assert traj.P[i - 1] == 20.0 and traj.P[i] == 30.0


def test_trajectory_columns_and_csv_header(fig7):
    traj = simulate(fig7.replace_sim(t_end=0.01))
    header = traj.to_csv().splitlines()[0]
    assert header == ",".join(f"{c}[{u}]" for c, u in COLUMNS)
    assert len(traj) == 501
    np.testing.assert_allclose(traj.power, traj.x2 * traj.i_o)
    with pytest.raises(AttributeError):
        traj.nonexistent


def test_estimator_error_is_controller_independent(fig7):
    """P_hat - P follows err0 exp(-gamma t) under IDA-PBC and PI alike."""
    base = constant_load(fig7, 20.0, 0.3).replace(P_hat_error=-5.0)
    runs = {"ida": simulate(base), "pi": simulate(base.replace(controller="pi"))}
    for traj in runs.values():
        expected = -5.0 * np.exp(-20.0 * traj.t)
        np.testing.assert_allclose(traj.P_tilde, expected, atol=1e-8)


def test_energy_descends_with_known_load(fig7):
    sc = constant_load(fig7, 30.0, 0.5).replace(estimator_bypass=True, x0=State(1.0, 18.0))
    traj = simulate(sc)
    g = gains_for(25.0, 30.0, sc.params, sc.k1)
    H = np.array([hd(State(a, b), 30.0, g, sc.params) for a, b in zip(traj.x1, traj.x2)])
    assert np.max(np.diff(H)) <= 1e-8 * np.max(np.abs(H))
    assert abs(traj.x2[-1] - 25.0) < 1e-3


def test_gains_synthesized_per_operating_point(fig7):
    gains = certify_schedule(fig7)
    assert [g.P_design for g in gains] == [20.0, 30.0]
    assert all(g.k1 == fig7.k1 for g in gains)


def test_run_many_preserves_order_and_returns_failures(fig7):
    scs = [constant_load(fig7, P, 0.05) for P in (10.0, 20.0, 30.0)]
    bad = fig7.replace_sim(mode="switched", dt=2.5e-7, f_ctrl=10e3, f_lpf=1e3, t_end=0.01)
    out = run_many(scs + [bad], workers=2)
    for r, P in zip(out[:3], (10.0, 20.0, 30.0)):
        assert r.P[0] == P
    assert isinstance(out[3], ModelValidityError)


def test_settle_time():
    t = np.linspace(0, 1, 11)
    x = np.array([0, 0, 5, 3, 1.5, 1.05, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert settle_time(t, x, 1.0, 0.1, 0.1) == pytest.approx(0.3)
    assert settle_time(t, np.ones(11), 1.0, 0.1, 0.0) == 0.0


# ---- switched runs ---------------------------------------------------------------


def test_duty_is_held_between_controller_samples(fig7):
    sc = fig7.replace_sim(mode="switched", dt=2.5e-7, f_ctrl=10e3, f_lpf=1e3,
                          record_rate=4e6, t_end=1e-3)
    traj = simulate(sc, check_gains=True)
    changes = traj.t[1:][np.diff(traj.u) != 0]
    # every change happens on the first integration step at or after a 100 us tick
    ticks = changes * 10e3
    np.testing.assert_allclose(ticks, np.round(ticks), atol=2.5e-7 * 10e3 * 1.01)


def test_slow_sampling_chain_loses_the_model(fig7):
    """A 10 kHz sample rate with a 1 kHz input filter destabilizes the loop within milliseconds."""
    sc = fig7.replace_sim(mode="switched", dt=None, f_ctrl=10e3, f_lpf=1e3, t_end=0.05)
    with pytest.raises(ModelValidityError) as info:
        simulate(sc)
    err = info.value
    assert 0 < err.t < 0.01
    assert err.trajectory is not None and len(err.trajectory) > 10
    assert err.trajectory.status != "ok"


def test_switched_matches_averaged_steady_state(fig7):
    sc = fig7.replace_sim(t_end=0.3)
    avg = simulate(sc)
    sw = simulate(sc.replace_sim(mode="switched", dt=2.5e-7))
    w = avg.window(0.2)
    assert np.mean(sw.x2[sw.window(0.2)]) == pytest.approx(np.mean(avg.x2[w]), rel=0.02)
    assert np.mean(sw.u[sw.window(0.2)]) == pytest.approx(0.625, rel=0.02)
