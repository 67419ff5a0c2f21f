import json
import math

import numpy as np
import pytest

from dopf.controls import nominal_controls
from dopf.cosim import (
    ComponentDefinition,
    InjectionFilter,
    Inbox,
    Message,
    Payload,
    Scenario,
    broker_run,
    channels_for,
    load_scenario,
    parse_scenario,
    wls_solve,
)
from dopf.cosim.estimation import WLSStateEstimator, measurement_model, parse_labels
from dopf.cosim.federates import (
    DOPFFederate,
    EstimatorFederate,
    FeederFederate,
    RecorderFederate,
    SensorFederate,
)
from dopf.exceptions import DeadlockDetected, RankDeficient, ScenarioFault, TopicUnbound
from dopf.grid_model import build_admittance, build_incidence
from dopf.linearization import build_sensitivities
from dopf.power_flow import PFConfig, apply_controls, root_injection, solve_controls, solve_fixed_point

from conftest import data_path

FEEDER8 = data_path("feeder8.json")
FEEDER_PUBS = (("feeder/voltages", "complex_vector"), ("feeder/powers", "complex_vector"),
               ("feeder/pv_available", "real_vector"), ("feeder/status", "text"))


def feeder_def(period=1.0, subs=()):
    return ComponentDefinition("feeder", "feeder", subscriptions=tuple(subs), publications=FEEDER_PUBS,
                               period=period)


def recorder_def(period=1.0, subs=("feeder/voltages",)):
    return ComponentDefinition("recorder", "recorder", subscriptions=tuple(subs), period=period)


def scenario(feds, duration=10.0, **kw):
    return Scenario(name="t", duration=duration, federates=tuple(feds), network=FEEDER8, digest="x", **kw)


class ProbeRecorder(RecorderFederate):
    """Recorder that also logs activation times and what each activation saw."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.seen = []

    def step(self, t, inbox):
        self.seen.append((t, inbox))
        return super().step(t, inbox)


def empty_inbox():
    return Inbox({}, {})


def inbox_with(*msgs):
    queued, latest = {}, {}
    for m in msgs:
        queued.setdefault(m.topic, []).append(m)
        latest[m.topic] = m
    return Inbox(queued, latest)


# --- scenario files -----------------------------------------------------------


def test_bundled_closed_loop_scenario():
    sc = load_scenario(data_path("closedloop8.json"))
    assert len(sc.federates) == 5 and sc.duration == 3600
    assert [f.role for f in sc.federates] == ["feeder", "sensor", "estimator", "dopf", "recorder"]


def test_unbound_topic_names_it():
    doc = {"duration": 5, "federates": [{"name": "rec", "role": "recorder", "subscriptions": ["ghost"]}]}
    with pytest.raises(TopicUnbound) as ei:
        parse_scenario(json.dumps(doc))
    assert "ghost" in str(ei.value) and "rec" in str(ei.value)


def test_empty_federate_list():
    sc = parse_scenario(json.dumps({"name": "empty", "duration": 30}))
    rec = broker_run(sc)
    assert rec.messages == [] and rec.meta["rounds"] == 0


# --- protocol -----------------------------------------------------------------


def test_recorder_only_activation_count():
    d = ComponentDefinition("rec", "recorder", period=1.0)
    sc = Scenario("r", 10.0, (d,))
    probe = ProbeRecorder(d, sc)
    rec = broker_run(sc, federates=[probe])
    assert [t for t, _ in probe.seen] == [float(k) for k in range(1, 11)]
    assert rec.meta["activations"] == {"rec": 10}


def test_latest_value_semantics():
    f, r = feeder_def(1.0), recorder_def(5.0)
    sc = scenario([f, r])
    probe = ProbeRecorder(r, sc)
    broker_run(sc, overrides={"recorder": probe})
    t, box = probe.seen[0]
    assert t == 5.0
    assert [m.timestamp for m in box.queued("feeder/voltages")] == [1.0, 2.0, 3.0, 4.0]
    assert box.latest("feeder/voltages").timestamp == 4.0


def test_causality_and_liveness():
    sc = load_scenario(data_path("closedloop8.json"))
    rdef = sc.federates[-1]
    probe = ProbeRecorder(rdef, sc, 4)
    rec = broker_run(sc, overrides={"recorder": probe})
    for t, box in probe.seen:
        assert all(m.timestamp < t for m in box.all_queued())
    periods = [f.period for f in sc.federates]
    assert rec.meta["rounds"] <= sc.duration / min(periods) + len(periods)
    ts = [m.timestamp for m in rec.messages]
    assert ts == sorted(ts)


def test_deadlock_when_nobody_requests_time():
    d = ComponentDefinition("rec", "recorder", period=None)
    with pytest.raises(DeadlockDetected):
        broker_run(Scenario("d", 10.0, (d,)))


def test_fault_halts_with_partial_recording():
    sc = scenario([feeder_def(1.0), recorder_def(1.0)], events=({"time": 3, "load_scale": 60.0},))
    with pytest.raises(ScenarioFault) as ei:
        broker_run(sc)
    err = ei.value
    assert err.time == 3.0
    assert [m.timestamp for m in err.recording.on("feeder/voltages")] == [1.0, 2.0]


def test_closed_loop_deterministic_and_thread_independent():
    sc = load_scenario(data_path("closedloop8.json"))
    a = broker_run(sc).to_ndjson()
    b = broker_run(sc).to_ndjson()
    c = broker_run(sc, threaded=True).to_ndjson()
    assert a == b == c


def test_closed_loop_regulation():
    sc = load_scenario(data_path("closedloop8.json"))
    rec = broker_run(sc)
    net = FeederFederate(sc.federates[0], sc).net
    summ = rec.regulation_summary(net.v_min, net.v_max, "feeder/voltages", "dopf/setpoints", event_time=300)
    assert summ["violations_total"] > 0  # the PV step does push the feeder out of band
    assert summ["violations_after_control"] == 0
    t_ctrl = summ["control_time"]
    nxt = [m for m in rec.on("feeder/voltages") if m.timestamp > t_ctrl][0]
    assert np.abs(nxt.payload.value).max() <= max(net.v_max) + 0.002


# --- feeder ---------------------------------------------------------------------


def test_feeder_base_solution_every_step(feeder8_mats):
    net, adm, maps = feeder8_mats
    fed = FeederFederate(feeder_def(), scenario([feeder_def()]))
    truth = solve_controls(net, adm, maps, nominal_controls(net), PFConfig(tol=1e-12, max_iter=500)).v_L
    for t in (1.0, 2.0, 3.0):
        out = fed.step(t, empty_inbox())
        np.testing.assert_allclose(out["voltages"].value, truth, atol=1e-10)
        assert out["status"].value == "ok"


def test_feeder_pv_step_raises_voltage():
    sc = scenario([feeder_def()], events=({"time": 30, "pv_available": {"pv1": 1.0}},))
    fed = FeederFederate(feeder_def(), sc)
    before = np.abs(fed.step(29.0, empty_inbox())["voltages"].value)
    after = np.abs(fed.step(30.0, empty_inbox())["voltages"].value)
    k = fed.net.node_index[fed.net.devices.pv_units[0].node] - 1
    assert after[k] > before[k]
    # matches an independent solve at the new availability
    net = fed.net
    st = solve_controls(net, build_admittance(net), build_incidence(net), nominal_controls(net),
                        PFConfig(tol=1e-12, max_iter=500))
    np.testing.assert_allclose(after, np.abs(st.v_L), atol=1e-10)


def test_feeder_rejects_out_of_box_setpoints():
    fdef = feeder_def(subs=("dopf/setpoints",))
    fed = FeederFederate(fdef, scenario([fdef]))
    u0 = fed.u
    bad = u0.replace(t_rg=u0.t_rg + 1000)
    msg = Message("dopf/setpoints", 0.0, Payload("control_vector", bad), "dopf", 7)
    out = fed.step(1.0, inbox_with(msg))
    assert out["status"].value.startswith("warning: setpoints from t=0 rejected")
    np.testing.assert_array_equal(fed.u.to_array(), u0.to_array())


# --- sensor ---------------------------------------------------------------------


def _truth_messages(feeder8_mats):
    net, adm, maps = feeder8_mats
    st = solve_controls(net, adm, maps, nominal_controls(net))
    s0 = root_injection(adm, st)
    v = Message("feeder/voltages", 0.0, Payload("complex_vector", st.v_L, net.nodes[1:]), "feeder", 0)
    p = Message("feeder/powers", 0.0, Payload("complex_vector", np.r_[s0, st.s_L], net.nodes), "feeder", 1)
    return st, s0, inbox_with(v, p)


def sensor(sigma, nodes=None, seed=0):
    inputs = {"sigma": sigma}
    if nodes is not None:
        inputs["measured_nodes"] = nodes
    d = ComponentDefinition("sensor", "sensor", inputs, ("feeder/voltages", "feeder/powers"),
                            (("sensor/measurements", "real_vector"),))
    return SensorFederate(d, Scenario("s", 1.0, (d,), seed=seed))


def test_sensor_noiseless_full(feeder8_mats):
    st, s0, box = _truth_messages(feeder8_mats)
    net = feeder8_mats[0]
    out = sensor(0.0, list(net.nodes[1:])).step(1.0, box)["measurements"]
    np.testing.assert_array_equal(out.value, np.r_[np.abs(st.v_L), s0.real, s0.imag])
    assert out.labels[-2:] == ("P0", "Q0")


def test_sensor_default_subset_is_every_other_node(feeder8_mats):
    _, _, box = _truth_messages(feeder8_mats)
    out = sensor(0.002).step(1.0, box)["measurements"]
    assert out.labels == ("v:n2", "v:n4", "v:n6", "P0", "Q0")


def test_sensor_noise_statistics(feeder8_mats):
    st, _, box = _truth_messages(feeder8_mats)
    sen = sensor(0.002, ["n3"], seed=5)
    n = 10_000
    z = np.array([sen.step(1.0, box)["measurements"].value[0] for _ in range(n)])
    assert abs(z.mean() - abs(st.v_L[2])) <= 4 * 0.002 / math.sqrt(n)
    assert z.std() == pytest.approx(0.002, rel=0.05)


def test_sensor_empty_subset(feeder8_mats):
    _, _, box = _truth_messages(feeder8_mats)
    out = sensor(0.002, []).step(1.0, box)["measurements"]
    assert out.labels == ("P0", "Q0") and out.value.size == 2


# --- estimator ------------------------------------------------------------------


def _linear_setup(net, adm, maps):
    s = apply_controls(net, maps, nominal_controls(net))
    base = solve_fixed_point(adm, s, net.base_voltage, PFConfig(tol=1e-12, max_iter=500))
    return build_sensitivities(adm, maps, base)


def test_wls_exact_recovery_full(feeder8_mats):
    net, adm, maps = feeder8_mats
    sens = _linear_setup(net, adm, maps)
    ch = channels_for(net, "p")
    meas = parse_labels(net, [f"v:{n}" for n in net.nodes[1:]] + ["P0", "Q0"])
    H, pred = measurement_model(sens, ch, meas)
    x = np.random.default_rng(1).normal(0, 0.01, len(ch))
    got, _ = wls_solve(H, H @ x, 0.002)
    np.testing.assert_allclose(got, x, atol=1e-8)


def test_wls_exact_recovery_subset(feeder8_mats):
    net, adm, maps = feeder8_mats
    sens = _linear_setup(net, adm, maps)
    ch = channels_for(net, "p", ["n2", "n4", "n6"]) + channels_for(net, "q", ["n4"])
    meas = parse_labels(net, ["v:n2", "v:n4", "v:n6", "P0", "Q0"])
    H, _ = measurement_model(sens, ch, meas)
    assert np.linalg.matrix_rank(H) == len(ch) < len(meas)
    x = np.array([0.01, -0.02, 0.005, 0.003])
    est = WLSStateEstimator(sigma=0.002).fit(H, H @ x)
    np.testing.assert_allclose(est.coef_, x, atol=1e-8)


def test_wls_rank_deficient(feeder8_mats):
    net, adm, maps = feeder8_mats
    sens = _linear_setup(net, adm, maps)
    H, _ = measurement_model(sens, channels_for(net, "pq"), parse_labels(net, ["P0", "Q0"]))
    with pytest.raises(RankDeficient):
        wls_solve(H, np.zeros(2), 0.002)


def test_measurement_model_matches_finite_difference(feeder8_mats):
    net, adm, maps = feeder8_mats
    sens = _linear_setup(net, adm, maps)
    ch = channels_for(net, "pq", ["n5"])
    meas = parse_labels(net, ["v:n5", "P0", "Q0"])
    H, pred = measurement_model(sens, ch, meas)
    cfg = PFConfig(tol=1e-13, max_iter=2000)

    def observe(s):
        st = solve_fixed_point(adm, s, net.base_voltage, cfg)
        s0 = root_injection(adm, st)
        return np.array([abs(st.v_L[4]), s0.real, s0.imag])

    s = sens.base.s_L
    np.testing.assert_allclose(observe(s), pred, atol=1e-10)
    eps = 1e-5
    for j, c in enumerate(ch):
        e = np.zeros(net.n, complex)
        e[c.node] = c.direction * eps
        fd = (observe(s + e) - observe(s - e)) / (2 * eps)
        np.testing.assert_allclose(fd, H[:, j], rtol=1e-4, atol=1e-9)


def test_filter_reduces_error(feeder8_mats):
    net, adm, maps = feeder8_mats
    cfg = PFConfig(tol=1e-12, max_iter=500)
    s_fc = apply_controls(net, maps, nominal_controls(net))
    rng = np.random.default_rng(8)
    s_true = s_fc + rng.normal(0, 0.01, net.n) + 1j * rng.normal(0, 0.005, net.n)
    st = solve_fixed_point(adm, s_true, net.base_voltage, cfg)
    s0 = root_injection(adm, st)
    labels = ["v:n2", "v:n4", "v:n6", "P0", "Q0"]
    truth = np.r_[np.abs(st.v_L[[1, 3, 5]]), s0.real, s0.imag]
    filt = InjectionFilter(net, adm, maps, s_fc, channels_for(net), sigma=0.002, sigma_power=0.002)
    meas_err, est_err = [], []
    for _ in range(100):
        z = truth + rng.normal(0, 0.002, truth.size)
        filt.update(labels, z)
        meas_err.append(z[:3] - truth[:3])
        est_err.append(filt.voltages()[[1, 3, 5]] - truth[:3])
    rms = lambda e: float(np.sqrt(np.mean(np.square(e))))  # noqa: E731
    assert rms(est_err) < rms(meas_err)


def _estimator(sc, **inputs):
    d = ComponentDefinition("estimator", "estimator", inputs, ("sensor/measurements",),
                            (("estimator/voltages", "real_vector"), ("estimator/injections", "complex_vector"),
                             ("estimator/status", "text")))
    return EstimatorFederate(d, sc)


def test_estimator_noiseless_recovers_truth(feeder8_mats):
    net, adm, maps = feeder8_mats
    st, s0, _ = _truth_messages(feeder8_mats)
    sc = scenario([])
    est = _estimator(sc, sigma_prior=None, channels="p")
    labels = [f"v:{n}" for n in net.nodes[1:]] + ["P0", "Q0"]
    z = np.r_[np.abs(st.v_L), s0.real, s0.imag]
    out = est.step(60.0, inbox_with(Message("sensor/measurements", 0.0, Payload("real_vector", z, labels))))
    assert out["status"].value == "ok"
    np.testing.assert_allclose(out["voltages"].value, np.abs(st.v_L), atol=1e-8)


def test_estimator_rank_deficient_is_stale():
    est = _estimator(scenario([]), sigma_prior=None)
    z = Payload("real_vector", [0.4, 0.1], ["P0", "Q0"])
    out = est.step(60.0, inbox_with(Message("sensor/measurements", 0.0, z)))
    assert out["status"].value.startswith("stale:")
    assert "voltages" not in out


# --- dopf -------------------------------------------------------------------------


def _dopf(sc, **inputs):
    d = ComponentDefinition("dopf", "dopf", inputs, ("estimator/injections",),
                            (("dopf/setpoints", "control_vector"), ("dopf/status", "text")))
    return DOPFFederate(d, sc)


def test_dopf_noop_returns_references(feeder8_mats):
    net, adm, maps = feeder8_mats
    fed = _dopf(scenario([]))
    s = apply_controls(net, maps, nominal_controls(net))
    out = fed.step(1.0, inbox_with(Message("estimator/injections", 0.0, Payload("complex_vector", s))))
    assert out["status"].value.startswith("ok: central")
    u, r = out["setpoints"].value, nominal_controls(net)
    for f in ("p_fl", "q_cb", "t_rg", "p_pv", "q_pv"):
        np.testing.assert_allclose(getattr(u, f), getattr(r, f), atol=1e-6)


def test_dopf_holds_on_solver_failure(feeder8_mats):
    net, adm, maps = feeder8_mats
    op = {"load_scale": 0.3, "pv_available": {"pv1": 0.9}}
    fed = _dopf(scenario([], operating_point=op), method="distributed", solver={"max_iter": 2})
    s = apply_controls(fed.net, fed.maps, nominal_controls(fed.net))
    before = fed.u.to_array()
    out = fed.step(1.0, inbox_with(Message("estimator/injections", 0.0, Payload("complex_vector", s))))
    assert out["status"].value.startswith("hold: MaxIterations")
    np.testing.assert_array_equal(out["setpoints"].value.to_array(), before)


def test_dopf_without_estimate_holds():
    out = _dopf(scenario([])).step(1.0, empty_inbox())
    assert out == {"status": out["status"]} and out["status"].value.startswith("hold:")
