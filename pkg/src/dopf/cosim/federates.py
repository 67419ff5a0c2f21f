"""The five federate kinds that close the feeder / sensing / estimation / control loop.

A federate sees the world only through its inbox and answers every
activation with a mapping ``port -> Payload``; the broker turns ports into
the topics listed in the component definition. Ports a definition does not
publish are dropped, so optional outputs (``status``, ``pv_available``) cost
nothing when nobody declares them.
"""

from __future__ import annotations

import logging

import numpy as np

from ..controls import check_box, nominal_controls
from ..exceptions import BoxViolation, DOPFError, NoConvergence, ShapeMismatch
from ..grid_model import NetworkModel, build_admittance, build_incidence, load_network
from ..linearization import build_sensitivities, injection_maps
from ..opf.central import solve_central
from ..opf.distributed import solve_distributed
from ..opf.problem import LimitSet, assemble_qp, default_costs
from ..opf.rounding import round_discrete
from ..opf.solution import SolverConfig
from ..power_flow import (
    PFConfig,
    apply_controls,
    no_load_voltage,
    nominal_taps,
    pv_available,
    regulator_taus,
    root_injection,
    solve_controls,
    solve_fixed_point,
    tap_shift,
)
from .estimation import InjectionFilter, channels_for
from .messages import Message, Payload
from .scenario import ComponentDefinition, Scenario

logger = logging.getLogger(__name__)

PF_CFG = PFConfig(tol=1e-10, max_iter=500)


class Inbox:
    """Messages handed to a federate at one activation.

    ``queued`` holds everything delivered since the previous activation, in
    publication order; ``latest`` keeps the newest value per topic across
    activations.
    """

    def __init__(self, queued: dict, latest: dict):
        self._queued = queued
        self._latest = latest

    def queued(self, topic: str | None) -> list[Message]:
        return list(self._queued.get(topic, ())) if topic else []

    def latest(self, topic: str | None) -> Message | None:
        return self._latest.get(topic) if topic else None

    def all_queued(self) -> list[Message]:
        out = [m for msgs in self._queued.values() for m in msgs]
        out.sort(key=lambda m: m.seq)
        return out


class Federate:
    """Base class; subclasses implement :meth:`step`."""

    role = ""

    def __init__(self, definition: ComponentDefinition, scenario: Scenario | None = None, index: int = 0):
        self.definition = definition
        self.name = definition.name
        self.period = definition.period
        self.scenario = scenario
        self.index = index
        self.fault: str | None = None
        self.activations = 0

    def sub(self, port: str) -> str | None:
        return self.definition.port(port, "sub")

    def input(self, key, default=None):
        return self.definition.static_inputs.get(key, default)

    def first_time(self) -> float | None:
        return self.period

    def next_time(self, t: float) -> float | None:
        return None if self.period is None else t + self.period

    def step(self, t: float, inbox: Inbox) -> dict:
        raise NotImplementedError

    def finalize(self, inbox: Inbox) -> None:
        """Called once after the last grant with every undelivered message."""


def _scenario_network(scenario: Scenario) -> NetworkModel:
    return load_network(scenario.network)


def _at_operating_point(net: NetworkModel, op: dict) -> NetworkModel:
    return net.with_operating_point(float(op.get("load_scale", 1.0)), op.get("pv_available"), op.get("load_delta"))


class FeederFederate(Federate):
    """Ground truth: nonlinear power flow at the current loads, PV and setpoints."""

    role = "feeder"

    def __init__(self, definition, scenario, index=0, network: NetworkModel | None = None):
        super().__init__(definition, scenario, index)
        self.raw = network if network is not None else _scenario_network(scenario)
        self.op = {"load_scale": 1.0, "pv_available": {}, "load_delta": {}}
        self._merge(scenario.operating_point if scenario else {})
        self.net = _at_operating_point(self.raw, self.op)
        self.adm = build_admittance(self.net)
        self.maps = build_incidence(self.net)
        self.u = nominal_controls(self.net)
        self.events = list(scenario.events if scenario else ())
        self._applied = 0
        self._setpoint_seq = -1

    def _merge(self, ev: dict):
        if "load_scale" in ev:
            self.op["load_scale"] = float(ev["load_scale"])
        for key in ("pv_available", "load_delta"):
            if key in ev:
                self.op[key] = {**self.op[key], **ev[key]}

    def _apply_events(self, t):
        changed = False
        while self._applied < len(self.events) and float(self.events[self._applied]["time"]) <= t:
            self._merge(self.events[self._applied])
            self._applied += 1
            changed = True
        if changed:
            self.net = _at_operating_point(self.raw, self.op)
            # PV output cannot exceed what is available now
            avail = pv_available(self.net)
            self.u = self.u.replace(p_pv=np.minimum(self.u.p_pv, avail))

    def step(self, t, inbox):
        self._apply_events(t)
        notes = []
        msg = inbox.latest(self.sub("setpoints"))
        if msg is not None and msg.seq != self._setpoint_seq:
            self._setpoint_seq = msg.seq
            cand = msg.payload.value
            try:
                avail = pv_available(self.net)
                cand = cand.replace(p0=self.u.p0, q0=self.u.q0) if cand.sizes == self.u.sizes else cand
                if cand.sizes == self.u.sizes:
                    cand = cand.replace(p_pv=np.minimum(cand.p_pv, avail))
                check_box(self.net, cand)
                self.u = cand
            except (BoxViolation, ShapeMismatch) as exc:
                notes.append(f"warning: setpoints from t={msg.timestamp:g} rejected ({exc})")
                logger.warning("%s: %s", self.name, notes[-1])
        try:
            st = solve_controls(self.net, self.adm, self.maps, self.u, PF_CFG)
        except NoConvergence as exc:
            self.fault = f"power flow did not converge at t={t:g}: {exc}"
            return {"status": Payload("text", "fault: " + self.fault)}
        s0 = root_injection(self.adm, st)
        ids = self.net.nodes
        out = {
            "voltages": Payload("complex_vector", st.v_L, ids[1:]),
            "powers": Payload("complex_vector", np.concatenate([[s0], st.s_L]), ids),
            "pv_available": Payload("real_vector", pv_available(self.net),
                                    [pv.id for pv in self.net.devices.pv_units]),
        }
        out["status"] = Payload("text", "; ".join(notes) if notes else "ok")
        return out


class SensorFederate(Federate):
    """Noisy |v| at a node subset plus noisy root P/Q."""

    role = "sensor"

    def __init__(self, definition, scenario=None, index=0):
        super().__init__(definition, scenario, index)
        self.sigma = float(self.input("sigma", 0.002))
        self.sigma_power = float(self.input("sigma_power", self.sigma))
        self.nodes = self.input("measured_nodes")  # None: every other non-root node
        seed = scenario.seed if scenario else 0
        self.rng = np.random.default_rng([seed, index])

    def step(self, t, inbox):
        vm = inbox.latest(self.sub("voltages"))
        pm = inbox.latest(self.sub("powers"))
        if vm is None or pm is None:
            return {}
        labels = list(vm.payload.labels or [f"{k + 1}" for k in range(vm.payload.value.size)])
        nodes = labels[1::2] if self.nodes is None else list(self.nodes)
        pos = {lab: k for k, lab in enumerate(labels)}
        missing = [n for n in nodes if n not in pos]
        if missing:
            raise ShapeMismatch(f"{self.name}: measured node(s) {missing} not published by the feeder")
        v = np.abs(vm.payload.value[[pos[n] for n in nodes]]) if nodes else np.zeros(0)
        s0 = complex(pm.payload.value[0])
        z = np.concatenate([v + self.rng.normal(0.0, 1.0, v.size) * self.sigma,
                            np.array([s0.real, s0.imag]) + self.rng.normal(0.0, 1.0, 2) * self.sigma_power])
        return {"measurements": Payload("real_vector", z, [f"v:{n}" for n in nodes] + ["P0", "Q0"])}


class EstimatorFederate(Federate):
    """Recursive WLS estimate of the injections; publishes |v| and complex injections.

    Setpoints seen on an optional ``setpoints`` subscription are treated as a
    known input change that reaches the measurements ``actuation_lag``
    seconds after publication.
    """

    role = "estimator"

    def __init__(self, definition, scenario, index=0, network: NetworkModel | None = None):
        super().__init__(definition, scenario, index)
        raw = network if network is not None else _scenario_network(scenario)
        self.net = _at_operating_point(raw, scenario.operating_point if scenario else {})
        self.adm = build_admittance(self.net)
        self.maps = build_incidence(self.net)
        u0 = nominal_controls(self.net)
        s_init = apply_controls(self.net, self.maps, u0)
        sp = self.input("sigma_prior", 0.05)
        self.filter = InjectionFilter(
            self.net, self.adm, self.maps, s_init,
            channels_for(self.net, self.input("channels", "pq"), self.input("channel_nodes")),
            sigma=float(self.input("sigma", 0.002)), sigma_power=float(self.input("sigma_power", 0.002)),
            sigma_prior=None if sp is None else float(sp),
            sigma_process=float(self.input("sigma_process", 0.001)),
            reset_quantile=float(self.input("reset_quantile", 0.999)),
        )
        self.lag = float(self.input("actuation_lag", 120.0))
        self.u = u0
        self.pending: list[Message] = []
        self.have_estimate = False
        self._P, self._Q = injection_maps(self.maps, u0.sizes)

    def _take_setpoints(self, t_meas):
        while self.pending and self.pending[0].timestamp + self.lag <= t_meas:
            u_new = self.pending.pop(0).payload.value
            if u_new.sizes != self.u.sizes:
                continue
            d = u_new.to_array() - self.u.to_array()
            self.filter.shift(self._P @ d + 1j * (self._Q @ d), taps=u_new.t_rg)
            self.u = u_new

    def step(self, t, inbox):
        self.pending.extend(inbox.queued(self.sub("setpoints")))
        snaps = inbox.queued(self.sub("measurements"))
        status = "ok"
        for msg in snaps:
            self._take_setpoints(msg.timestamp)
            try:
                self.filter.update(msg.payload.labels, msg.payload.value)
                self.have_estimate = True
            except DOPFError as exc:
                status = f"stale: {exc}"
                logger.warning("%s: estimate at t=%g is stale (%s)", self.name, t, exc)
        if not self.have_estimate:
            return {"status": Payload("text", status if snaps else "stale: no measurements yet")}
        try:
            vm = self.filter.voltages()
        except NoConvergence as exc:
            return {"status": Payload("text", f"stale: {exc}")}
        ids = self.net.nodes[1:]
        return {
            "voltages": Payload("real_vector", vm, ids),
            "injections": Payload("complex_vector", self.filter.s, ids),
            "status": Payload("text", status),
        }


class DOPFFederate(Federate):
    """Re-linearizes at the estimated injections and solves for new setpoints."""

    role = "dopf"

    def __init__(self, definition, scenario, index=0, network: NetworkModel | None = None):
        super().__init__(definition, scenario, index)
        settings = dict(scenario.dopf) if scenario else {}
        settings.update(definition.static_inputs)
        self.settings = settings
        raw = network if network is not None else _scenario_network(scenario)
        self.op = dict(scenario.operating_point) if scenario else {}
        self.raw = raw
        self.net = _at_operating_point(raw, self.op)
        self.adm = build_admittance(self.net)
        self.maps = build_incidence(self.net)
        self.method = settings.get("method", "central")
        if self.method not in ("central", "distributed"):
            raise ValueError(f"unknown DOPF method {self.method!r}")
        self.cfg = SolverConfig.from_dict(settings.get("solver", {}))
        self.margin = float(settings.get("voltage_margin", 0.0))
        self.round = bool(settings.get("round_discrete", False))
        self.cost_overrides = settings.get("costs", {})
        self.u = nominal_controls(self.net)
        self.last_solution = None

    def _current_network(self, inbox) -> NetworkModel:
        msg = inbox.latest(self.sub("pv_available"))
        if msg is None or not msg.payload.labels:
            return self.net
        avail = dict(zip(msg.payload.labels, (float(x) for x in msg.payload.value)))
        return _at_operating_point(self.raw, {**self.op, "pv_available": {**self.op.get("pv_available", {}), **avail}})

    def solve(self, s_est, net: NetworkModel):
        avail = pv_available(net)
        u_base = self.u.replace(p_pv=np.minimum(self.u.p_pv, avail))
        w = no_load_voltage(self.adm, net.base_voltage)
        shift = tap_shift(w, self.maps.C_r, regulator_taus(net), u_base.t_rg - nominal_taps(net))
        base = solve_fixed_point(self.adm, np.asarray(s_est, dtype=complex), net.base_voltage, PF_CFG, w_shift=shift)
        taus = regulator_taus(net) if net.devices.regulators else 0.00625
        sens = build_sensitivities(self.adm, self.maps, base, taus, base_controls=u_base, p_available=avail)
        cost = default_costs(net, root_injection(self.adm, base), self.cost_overrides)
        limits = LimitSet.from_network(net)
        limits = limits.with_voltage(limits.v_lo + self.margin, limits.v_hi - self.margin)
        if self.method == "central":
            sol = solve_central(assemble_qp(sens, cost, limits), self.cfg)
        else:
            sol = solve_distributed(sens, cost, limits, cfg=self.cfg)
        u = sol.u_star
        if self.round:
            u = round_discrete(net, u)
        return u, sol

    def step(self, t, inbox):
        msg = inbox.latest(self.sub("injections"))
        if msg is None:
            return {"status": Payload("text", "hold: no estimate yet")}
        net = self._current_network(inbox)
        try:
            u, sol = self.solve(msg.payload.value, net)
        except DOPFError as exc:
            logger.warning("%s: holding setpoints at t=%g (%s)", self.name, t, exc)
            return {"setpoints": Payload("control_vector", self.u),
                    "status": Payload("text", f"hold: {type(exc).__name__}: {exc}")}
        self.u = u
        self.last_solution = sol
        return {"setpoints": Payload("control_vector", u),
                "status": Payload("text", f"ok: {sol.method} iterations={sol.iterations} "
                                          f"objective={sol.objective:.10g}")}


class RecorderFederate(Federate):
    """Keeps every message on its subscribed topics."""

    role = "recorder"

    def __init__(self, definition, scenario=None, index=0):
        super().__init__(definition, scenario, index)
        self.messages: list[Message] = []

    def step(self, t, inbox):
        self.messages.extend(inbox.all_queued())
        return {}

    def finalize(self, inbox):
        self.messages.extend(inbox.all_queued())


FEDERATE_CLASSES = {
    "feeder": FeederFederate,
    "sensor": SensorFederate,
    "estimator": EstimatorFederate,
    "dopf": DOPFFederate,
    "recorder": RecorderFederate,
}


def make_federate(definition: ComponentDefinition, scenario: Scenario, index: int,
                  network: NetworkModel | None = None) -> Federate:
    cls = FEDERATE_CLASSES[definition.role]
    if cls in (FeederFederate, EstimatorFederate, DOPFFederate):
        return cls(definition, scenario, index, network=network)
    return cls(definition, scenario, index)


__all__ = ["DOPFFederate", "EstimatorFederate", "FEDERATE_CLASSES", "FeederFederate", "Federate", "Inbox",
           "RecorderFederate", "SensorFederate", "make_federate"]
