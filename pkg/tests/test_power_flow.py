import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopf.controls import nominal_controls
from dopf.exceptions import BoxViolation, NoConvergence
from dopf.grid_model import build_admittance, build_incidence, random_radial_network
from dopf.power_flow import (
    PFConfig,
    apply_controls,
    line_currents,
    no_load_voltage,
    root_injection,
    solve_controls,
    solve_fixed_point,
    tap_shift,
    total_losses,
)

from conftest import random_fixtures
from oracles import injections, line_current_oracle, newton_solve, nodal_admittance, two_bus_voltage

TIGHT = PFConfig(tol=1e-12, max_iter=1000)


def test_two_node_matches_closed_form(two_node):
    adm = build_admittance(two_node)
    s = np.array([-(0.1 + 0.05j)])
    st_ = solve_fixed_point(adm, s, 1.0, TIGHT)
    assert abs(st_.v_L[0]) == pytest.approx(two_bus_voltage(1 - 10j, 0.1 + 0.05j), abs=1e-10)


def test_no_load_voltage_equals_root(feeder8):
    adm = build_admittance(feeder8)
    np.testing.assert_allclose(no_load_voltage(adm, 1.0), 1.0, atol=1e-12)
    st_ = solve_fixed_point(adm, np.zeros(7, complex), 1.0)
    np.testing.assert_allclose(st_.v_L, 1.0, atol=1e-12)


def test_feeder8_against_root_finder(feeder8_mats):
    net, adm, maps = feeder8_mats
    s = apply_controls(net, maps, nominal_controls(net))
    st_ = solve_fixed_point(adm, s, 1.0, TIGHT)
    np.testing.assert_allclose(st_.v_L, newton_solve(net, s), atol=1e-9)


def test_balance_and_losses(feeder8_mats):
    net, adm, maps = feeder8_mats
    s = apply_controls(net, maps, nominal_controls(net))
    st_ = solve_fixed_point(adm, s, 1.0, TIGHT)
    vf = np.concatenate([[1.0], st_.v_L])
    inj = injections(nodal_admittance(net), vf)
    np.testing.assert_allclose(inj[1:], s, atol=1e-10)
    assert root_injection(adm, st_) == pytest.approx(inj[0], abs=1e-12)
    # losses are what the root supplies beyond the loads
    assert total_losses(adm, st_) == pytest.approx(inj.sum(), abs=1e-12)
    assert total_losses(adm, st_).real > 0
    np.testing.assert_allclose(line_currents(adm, st_), line_current_oracle(net, vf), atol=1e-12)


def test_max_iter_starvation(feeder8_mats):
    net, adm, maps = feeder8_mats
    with pytest.raises(NoConvergence) as ei:
        solve_controls(net, adm, maps, nominal_controls(net), PFConfig(max_iter=1))
    assert ei.value.iterations == 1


def test_collapse_reported(two_node):
    adm = build_admittance(two_node)
    with pytest.raises(NoConvergence):
        solve_fixed_point(adm, np.array([-(5.0 + 5.0j)]), 1.0)


def test_residual_history_nonincreasing_on_light_load(feeder8_mats):
    net, adm, maps = feeder8_mats
    st_ = solve_controls(net, adm, maps, nominal_controls(net), TIGHT)
    h = np.array(st_.residual_history)
    assert np.all(np.diff(h) <= 0)


def test_apply_controls_signs(feeder8_mats):
    net, adm, maps = feeder8_mats
    u = nominal_controls(net)
    s = apply_controls(net, maps, u)
    # n3 carries the 0.05 cap bank against a 0.02 reactive load
    assert s[2] == pytest.approx(-0.06 + 0.03j)
    shed = u.replace(p_fl=np.array([0.03, 0.0]))
    assert apply_controls(net, maps, shed)[3] - s[3] == pytest.approx(0.03)
    curtailed = u.replace(p_pv=np.array([0.05]))
    assert apply_controls(net, maps, curtailed)[5] - s[5] == pytest.approx(-0.05)
    with pytest.raises(BoxViolation):
        apply_controls(net, maps, u.replace(q_cb=np.array([0.5])))


def test_tap_scales_downstream_no_load_voltage(feeder8_mats):
    net, adm, maps = feeder8_mats
    w = no_load_voltage(adm, 1.0)
    shift = tap_shift(w, maps.C_r, [0.00625], [2.0])
    expect = np.where(maps.C_r[:, 0] > 0, 2 * 0.00625, 0.0)
    np.testing.assert_allclose(shift.real, expect, atol=1e-14)
    st_ = solve_fixed_point(adm, np.zeros(7, complex), 1.0, TIGHT, w_shift=shift)
    np.testing.assert_allclose(np.abs(st_.v_L), 1 + expect, atol=1e-12)


def test_random_fixtures_against_root_finder():
    for net in random_fixtures():
        adm = build_admittance(net)
        maps = build_incidence(net)
        s = apply_controls(net, maps, nominal_controls(net))
        v = solve_fixed_point(adm, s, 1.0, TIGHT).v_L
        np.testing.assert_allclose(v, newton_solve(net, s), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20), st.floats(0.1, 1.5))
def test_converged_states_satisfy_balance(seed, n, scale):
    net = random_radial_network(np.random.default_rng(seed), n, load_scale=scale)
    adm = build_admittance(net)
    s = -np.array(net.base_load)
    try:
        st_ = solve_fixed_point(adm, s, 1.0, PFConfig(tol=1e-10, max_iter=500))
    except NoConvergence:
        return
    vf = np.concatenate([[1.0], st_.v_L])
    inj = injections(nodal_admittance(net), vf)
    assert np.max(np.abs(inj[1:] - s)) <= 1e-8
    assert abs(inj.sum() - total_losses(adm, st_)) <= 1e-8
