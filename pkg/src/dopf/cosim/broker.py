"""In-process time-grant broker.

Each round grants the smallest requested time ``t``. Every federate due at
``t`` is activated with the messages published strictly before ``t`` that
it has not seen yet; what it publishes is stamped ``t`` and becomes visible
from the next round on. Outputs are committed in registration order, so the
result does not depend on whether the due federates ran one after another
or on their own threads.
"""

from __future__ import annotations

import logging
import math
import queue
import threading

from ..exceptions import DeadlockDetected, ScenarioFault, ValidationError
from .federates import Federate, Inbox, RecorderFederate, make_federate
from .messages import Message, Payload
from .recording import Recording
from .scenario import Scenario, validate_scenario

logger = logging.getLogger(__name__)


class _Bus:
    """Topic log plus per-subscriber read cursors."""

    def __init__(self, federates):
        self.log: list[Message] = []
        self.cursor = {f.name: 0 for f in federates}
        self.latest = {f.name: {} for f in federates}
        self.subs = {f.name: set(f.definition.subscriptions) for f in federates}
        self.seq = 0

    def inbox(self, fed: Federate, before: float) -> Inbox:
        """Undelivered messages with timestamp < ``before`` on ``fed``'s topics."""
        queued: dict = {}
        k = self.cursor[fed.name]
        subs, latest = self.subs[fed.name], self.latest[fed.name]
        while k < len(self.log) and self.log[k].timestamp < before:
            m = self.log[k]
            if m.topic in subs:
                queued.setdefault(m.topic, []).append(m)
                latest[m.topic] = m
            k += 1
        self.cursor[fed.name] = k
        return Inbox(queued, dict(latest))

    def publish(self, fed: Federate, t: float, outputs: dict) -> None:
        for port, payload in outputs.items():
            topic = fed.definition.port(port, "pub")
            if topic is None:
                continue
            if not isinstance(payload, Payload):
                raise TypeError(f"{fed.name}: port '{port}' returned {type(payload).__name__}, not Payload")
            kind = fed.definition.publication_kind(topic)
            if payload.kind != kind:
                raise ValidationError(f"{fed.name}: topic '{topic}' declared {kind} but got {payload.kind}")
            self.log.append(Message(topic, t, payload, fed.name, self.seq))
            self.seq += 1


class _Worker:
    """One thread per federate; runs activations handed over by the broker."""

    def __init__(self, fed: Federate):
        self.fed = fed
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._loop, name=f"federate-{fed.name}", daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            job = self.inbox.get()
            if job is None:
                return
            t, box = job
            try:
                self.outbox.put((True, self.fed.step(t, box)))
            except BaseException as exc:  # handed back to the broker thread
                self.outbox.put((False, exc))

    def submit(self, t, box):
        self.inbox.put((t, box))

    def result(self):
        ok, val = self.outbox.get()
        if not ok:
            raise val
        return val

    def stop(self):
        self.inbox.put(None)
        self.thread.join()


def build_federates(scenario: Scenario, overrides: dict | None = None) -> list[Federate]:
    """Instantiate the scenario's federates; ``overrides`` maps names to ready-made objects."""
    overrides = overrides or {}
    network = None
    if any(d.role in ("feeder", "estimator", "dopf") and d.name not in overrides for d in scenario.federates):
        from ..grid_model import load_network

        network = load_network(scenario.network)
    out = []
    for k, d in enumerate(scenario.federates):
        out.append(overrides[d.name] if d.name in overrides else make_federate(d, scenario, k, network))
    return out


def broker_run(scenario: Scenario, threaded: bool = False, federates: list | None = None,
               overrides: dict | None = None) -> Recording:
    """Run the scenario to its duration and return what the recorders captured.

    Raises
    ------
    TopicUnbound
        A subscription has no publisher.
    DeadlockDetected
        Time cannot advance because no federate requests a finite time.
    ScenarioFault
        A federate reported a fault; the partial recording is attached.
    """
    validate_scenario(scenario)
    feds = federates if federates is not None else build_federates(scenario, overrides)
    bus = _Bus(feds)
    nxt = {f.name: (math.inf if f.first_time() is None else float(f.first_time())) for f in feds}
    workers = {f.name: _Worker(f) for f in feds} if threaded else {}
    rounds = 0
    t = 0.0
    try:
        if feds and scenario.duration > 0 and all(math.isinf(v) for v in nxt.values()):
            raise DeadlockDetected("no federate requests a finite time")
        while feds:
            t = min(nxt.values())
            if math.isinf(t):
                if any(not isinstance(f, RecorderFederate) for f in feds):
                    raise DeadlockDetected(f"no federate requests a finite time after t={_last(bus):g}")
                break
            if t > scenario.duration:
                break
            rounds += 1
            due = [f for f in feds if nxt[f.name] == t]
            boxes = [bus.inbox(f, t) for f in due]
            if threaded:
                for f, box in zip(due, boxes):
                    workers[f.name].submit(t, box)
                results = [workers[f.name].result() for f in due]
            else:
                results = [f.step(t, box) for f, box in zip(due, boxes)]
            for f, out in zip(due, results):
                f.activations += 1
                bus.publish(f, t, out or {})
                req = f.next_time(t)
                nxt[f.name] = math.inf if req is None else float(req)
                if nxt[f.name] <= t:
                    raise ValidationError(f"{f.name} requested t={nxt[f.name]:g}, not after {t:g}")
            faulty = [f for f in due if f.fault]
            if faulty:
                rec = _finish(scenario, feds, bus, rounds)
                raise ScenarioFault(f"{faulty[0].name}: {faulty[0].fault}", time=t, recording=rec)
    finally:
        for w in workers.values():
            w.stop()
    return _finish(scenario, feds, bus, rounds)


def _last(bus: _Bus) -> float:
    return bus.log[-1].timestamp if bus.log else 0.0


def _finish(scenario: Scenario, feds, bus: _Bus, rounds: int) -> Recording:
    msgs = {}
    for f in feds:
        if isinstance(f, RecorderFederate):
            f.finalize(bus.inbox(f, math.inf))
            for m in f.messages:
                msgs[m.seq] = m
    meta = {"rounds": rounds, "activations": {f.name: f.activations for f in feds}, "published": len(bus.log)}
    return Recording([msgs[k] for k in sorted(msgs)], scenario.digest, scenario.seed, scenario.name,
                     scenario.duration, meta)
