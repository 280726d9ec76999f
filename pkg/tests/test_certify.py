import math
import warnings

import numpy as np
import pytest

import oracles
from conftest import OPERATING_POINTS
from idapbc_cpl.certify import (GridTooSmallWarning, check_equilibrium, check_estimator_decay,
                                check_fd_negativity, check_k1_bound, check_pde_residual, classify,
                                estimate_attraction_region, find_zeros, fit_decay_rates,
                                halton_points, k1_flip_point, locate_secondary_equilibrium,
                                min_hessian_eig, point_in_polygon, run_all)
from idapbc_cpl.control import ControllerGains, _hd, gains_for, k2_gain
from idapbc_cpl.model import BOARD_PARAMS, Equilibrium

p = BOARD_PARAMS
POINTS = sorted(OPERATING_POINTS)


def design(name, k1=0.1):
    x2s, P = OPERATING_POINTS[name]
    return gains_for(x2s, P, p, k1), P


@pytest.mark.parametrize("name", POINTS)
def test_pde_residual_is_round_off(name):
    g, P = design(name)
    res = check_pde_residual(P, g, p)
    assert res.passed and res.worst < 1e-12


@pytest.mark.parametrize("name", POINTS)
def test_pde_residual_does_not_depend_on_k1_k2(name):
    # the shaping term is a function of W alone, which lies in the kernel of the PDE operator
    g, P = design(name)
    for k1, k2 in ((g.k1, g.k2 * 1.01), (5.0, -1e3), (1e-4, 0.0)):
        assert check_pde_residual(P, ControllerGains(k1, k2, g.equilibrium, P), p, 200).passed


@pytest.mark.parametrize("name", POINTS)
def test_equilibrium_checks_pass_for_synthesized_gains(name):
    g, P = design(name)
    assert all(c.passed for c in check_equilibrium(g, P, p))


@pytest.mark.parametrize("name", POINTS)
def test_stationarity_fails_with_perturbed_k2(name):
    g, P = design(name)
    bad = ControllerGains(g.k1, g.k2 * 1.01, g.equilibrium, P)
    stat, _ = check_equilibrium(bad, P, p)
    assert not stat.passed


@pytest.mark.parametrize("name", POINTS)
def test_hessian_flip_matches_determinant_root(name):
    x2s, P = OPERATING_POINTS[name]
    eq = Equilibrium.from_voltage(x2s, P, p.E)
    k1f, bound = k1_flip_point(eq, P, p)
    ref = oracles.k1_det_root(eq.x1_star, eq.x2_star, P, p.E, p.L, p.C)
    assert abs(k1f - float(ref)) <= 1e-6 * abs(float(ref))
    assert min_hessian_eig(eq, P, k1f * 1.05, p) < 0 < min_hessian_eig(eq, P, k1f * 0.95, p)
    assert check_k1_bound(eq, P, p).passed


@pytest.mark.parametrize("name", POINTS)
def test_curvature_check_fails_past_the_flip(name):
    x2s, P = OPERATING_POINTS[name]
    eq = Equilibrium.from_voltage(x2s, P, p.E)
    k1 = 1.5 * k1_flip_point(eq, P, p)[0]
    g = ControllerGains(k1, k2_gain(eq, P, k1, p), eq, P)
    stat, curv = check_equilibrium(g, P, p)
    assert stat.passed and not curv.passed


def test_fd_negativity():
    res = check_fd_negativity(p)
    assert res.passed and res.worst < 0


def test_halton_points_deterministic_and_in_box():
    a = halton_points(100, ((0.1, 10), (1, 50)), seed=3)
    np.testing.assert_array_equal(a, halton_points(100, ((0.1, 10), (1, 50)), seed=3))
    assert a[:, 0].min() >= 0.1 and a[:, 0].max() <= 10
    assert a[:, 1].min() >= 1 and a[:, 1].max() <= 50
    with pytest.raises(ValueError):
        halton_points(10, ((0, 1), (1, 2)))


@pytest.fixture(scope="module")
def boost_region():
    g, P = design("boost", 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("error", GridTooSmallWarning)
        c, poly, info = estimate_attraction_region(g, P, p)
    return g, P, c, poly, info


def test_region_contains_equilibrium(boost_region):
    g, P, c, poly, info = boost_region
    eq = g.equilibrium
    assert c > info["h_star"]
    assert point_in_polygon((eq.x1_star, eq.x2_star), poly)
    assert info["limiting_edges"] == ["x1_low"]


def test_region_level_is_below_the_saddle(boost_region):
    g, P, c, poly, info = boost_region
    sad = locate_secondary_equilibrium(g, P, p)
    assert sad is not None and sad.kind == "saddle" and sad.robust
    assert c < _hd(*sad.state, P, p.E, p.L, p.C, g.k1, g.k2)
    assert not point_in_polygon(sad.state, poly)


def test_secondary_zero_is_a_true_zero_and_the_design_point_is_stable():
    g, P = design("boost", 0.1)
    sad = locate_secondary_equilibrium(g, P, p)
    F = oracles.fd(*sad.state, p.E, p.L, p.C) * oracles.mp.matrix(
        oracles.grad(*sad.state, P, p.E, p.L, p.C, g.k1, g.k2))
    assert abs(F[0]) * p.L < 1e-8 and abs(F[1]) * p.C < 1e-8
    eq = g.equilibrium
    (cp,) = find_zeros(g, P, p, [(eq.x1_star * 1.01, eq.x2_star * 0.99)])
    assert cp.kind == "stable"
    np.testing.assert_allclose(cp.state, (eq.x1_star, eq.x2_star), rtol=1e-8)


def test_small_box_warns():
    g, P = design("boost", 0.1)
    eq = g.equilibrium
    box = ((0.5 * eq.x1_star, 1.2 * eq.x1_star), (0.9 * eq.x2_star, 1.05 * eq.x2_star))
    with pytest.warns(GridTooSmallWarning):
        estimate_attraction_region(g, P, p, box=box, n=41, max_n=81)


@pytest.mark.parametrize("eigs,kind", [((-1, -2), "stable"), ((1, 2), "unstable"),
                                       ((-1, 2), "saddle"), ((0, -1), "degenerate"),
                                       ((-1 + 2j, -1 - 2j), "stable")])
def test_classify(eigs, kind):
    assert classify(np.array(eigs)) == kind


def test_point_in_polygon():
    sq = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float)
    assert point_in_polygon((0.5, 0.5), sq)
    assert not point_in_polygon((1.5, 0.5), sq)


def test_fit_decay_rates_recovers_exponent():
    t = np.linspace(0, 2, 2001)
    P = np.where(t < 1, 20.0, 30.0)
    err = np.where(t < 1, -10 * np.exp(-20 * t), 10 * np.exp(-20 * (t - 1)))
    rates = fit_decay_rates(t, err, P)
    assert [r[0] for r in rates] == [0.0, pytest.approx(1.0)]
    for _, slope in rates:
        assert slope == pytest.approx(-20.0, rel=1e-9)


def test_estimator_decay_check_without_error_fails():
    class T:
        t = np.linspace(0, 1, 100)
        P = np.full(100, 20.0)
        P_hat = np.full(100, 20.0)
    res = check_estimator_decay(T, 20.0)
    assert not res.passed and math.isnan(res.worst)


@pytest.mark.parametrize("name", POINTS)
def test_full_report_passes_and_is_deterministic(name):
    x2s, P = OPERATING_POINTS[name]
    a = run_all(x2s, P, p, 0.1, n_samples=300)
    b = run_all(x2s, P, p, 0.1, n_samples=300)
    assert a.passed, a.to_text()
    assert a.to_json() == b.to_json()
    assert a.saddle is not None


def test_full_report_fails_with_perturbed_k2():
    x2s, P = OPERATING_POINTS["boost"]
    rep = run_all(x2s, P, p, 0.1, n_samples=300, k2_perturb=0.01)
    assert not rep.passed
    failed = {c.name for c in rep.checks if not c.passed}
    assert "stationarity at x*" in failed
