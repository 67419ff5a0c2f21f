"""Scenario and component-definition files."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources

from ..exceptions import ParseError, TopicUnbound, ValidationError
from ..grid_model import _line_of
from .messages import KINDS

ROLES = ("feeder", "sensor", "estimator", "dopf", "recorder")

# output ports each role must publish; the port is the last path segment of the topic
REQUIRED_PUBLICATIONS = {
    "feeder": {"voltages": "complex_vector", "powers": "complex_vector"},
    "sensor": {"measurements": "real_vector"},
    "estimator": {"voltages": "real_vector", "injections": "complex_vector"},
    "dopf": {"setpoints": "control_vector"},
    "recorder": {},
}
REQUIRED_SUBSCRIPTIONS = {
    "feeder": (),
    "sensor": ("voltages", "powers"),
    "estimator": ("measurements",),
    "dopf": ("injections",),
    "recorder": (),
}

DEFAULT_PERIODS = {"feeder": 60.0, "sensor": 60.0, "estimator": 1500.0, "dopf": 1800.0, "recorder": 60.0}


def port_of(topic: str) -> str:
    return topic.rsplit("/", 1)[-1]


@dataclass(frozen=True)
class ComponentDefinition:
    """One federate: its role, static inputs, topics and activation period.

    ``period=None`` makes a passive federate that never requests time.
    """

    name: str
    role: str
    static_inputs: dict = field(default_factory=dict)
    subscriptions: tuple = ()
    publications: tuple = ()  # (topic, kind) pairs
    period: float | None = 60.0

    def __post_init__(self):
        if not self.name:
            raise ValidationError("federate name must be nonempty")
        if self.role not in ROLES:
            raise ValidationError(f"federate '{self.name}': unknown role '{self.role}'")
        if self.period is not None and not self.period > 0:
            raise ValidationError(f"federate '{self.name}': period must be positive")
        for t in self.subscriptions:
            if not isinstance(t, str) or not t:
                raise ValidationError(f"federate '{self.name}': topics must be nonempty strings")
        for t, kind in self.publications:
            if not isinstance(t, str) or not t:
                raise ValidationError(f"federate '{self.name}': topics must be nonempty strings")
            if kind not in KINDS:
                raise ValidationError(f"federate '{self.name}': unknown value kind '{kind}' for '{t}'")

    def publication_kind(self, topic: str) -> str | None:
        for t, kind in self.publications:
            if t == topic:
                return kind
        return None

    def port(self, name: str, which: str = "sub") -> str | None:
        topics = self.subscriptions if which == "sub" else [t for t, _ in self.publications]
        for t in topics:
            if port_of(t) == name:
                return t
        return None


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    federates: tuple
    network: str | None = None
    operating_point: dict = field(default_factory=dict)
    events: tuple = ()
    seed: int = 0
    dopf: dict = field(default_factory=dict)
    digest: str = ""

    def publisher_of(self, topic: str) -> ComponentDefinition | None:
        for f in self.federates:
            if f.publication_kind(topic) is not None:
                return f
        return None


def canonical_digest(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def validate_scenario(sc: Scenario) -> None:
    """Topic binding and port checks; raises :class:`TopicUnbound` or :class:`ValidationError`."""
    names = [f.name for f in sc.federates]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ValidationError(f"duplicate federate name(s) {sorted(dup)}")
    owner = {}
    for f in sc.federates:
        for t, _ in f.publications:
            if t in owner:
                raise ValidationError(f"topic '{t}' published by both '{owner[t]}' and '{f.name}'")
            owner[t] = f.name
    for f in sc.federates:
        for t in f.subscriptions:
            if t not in owner:
                raise TopicUnbound(t, subscriber=f.name)
            if owner[t] == f.name:
                raise ValidationError(f"federate '{f.name}' subscribes to its own topic '{t}'")
        for port, kind in REQUIRED_PUBLICATIONS[f.role].items():
            t = f.port(port, "pub")
            if t is None:
                raise ValidationError(f"{f.role} federate '{f.name}' must publish a '.../{port}' topic")
            if f.publication_kind(t) != kind:
                raise ValidationError(f"topic '{t}' of '{f.name}' must carry {kind}")
        for port in REQUIRED_SUBSCRIPTIONS[f.role]:
            if f.port(port) is None:
                raise ValidationError(f"{f.role} federate '{f.name}' must subscribe to a '.../{port}' topic")
    if not sc.duration >= 0:
        raise ValidationError("duration must be nonnegative")
    if any(f.role in ("feeder", "estimator", "dopf") for f in sc.federates) and not sc.network:
        raise ValidationError("scenario needs a 'network' file for grid federates")


def _component(d: dict, text: str, k: int) -> ComponentDefinition:
    if not isinstance(d, dict):
        raise ParseError(f"federates[{k}] must be an object", line=_line_of(text, '"federates"'),
                         field=f"federates[{k}]")
    try:
        role = d["role"]
        name = d.get("name", role)
        pubs = tuple((p[0], p[1]) if isinstance(p, (list, tuple)) else (p["topic"], p["kind"])
                     for p in d.get("publications", []))
        period = d.get("period", DEFAULT_PERIODS.get(role, 60.0))
        return ComponentDefinition(
            name=str(name), role=str(role), static_inputs=dict(d.get("static_inputs", {})),
            subscriptions=tuple(d.get("subscriptions", [])), publications=pubs,
            period=None if period is None else float(period),
        )
    except (KeyError, IndexError, TypeError) as exc:
        line = _line_of(text, f'"{d.get("name", "")}"') if isinstance(d.get("name"), str) else None
        raise ParseError(f"federates[{k}]: missing or malformed field {exc}", line=line,
                         field=f"federates[{k}]") from None


def parse_scenario(text: str, path=None, base_dir: str | None = None) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object", line=1, path=path)
    try:
        feds = tuple(_component(d, text, k) for k, d in enumerate(doc.get("federates", [])))
    except ParseError as exc:
        raise ParseError(exc.reason, line=exc.line, field=exc.field, path=path) from None
    net = doc.get("network")
    if net is not None:
        net = resolve_network_path(str(net), base_dir)
    try:
        duration = float(doc.get("duration", 0.0))
        seed = int(doc.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad scenario field: {exc}", path=path) from None
    events = tuple(sorted((dict(e) for e in doc.get("events", [])), key=lambda e: float(e["time"])))
    sc = Scenario(
        name=str(doc.get("name", "scenario")), duration=duration, federates=feds, network=net,
        operating_point=dict(doc.get("operating_point", {})), events=events, seed=seed,
        dopf=dict(doc.get("dopf", {})), digest=canonical_digest(doc),
    )
    validate_scenario(sc)
    return sc


def resolve_network_path(ref: str, base_dir: str | None) -> str:
    """Relative to the scenario file first, then the bundled data directory."""
    if os.path.isabs(ref):
        return ref
    if base_dir is not None:
        cand = os.path.join(base_dir, ref)
        if os.path.exists(cand):
            return cand
    bundled = resources.files("dopf") / "data" / ref
    if bundled.is_file():
        return str(bundled)
    return os.path.join(base_dir or ".", ref)


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ParseError("file not found", path=path) from None
    except UnicodeDecodeError:
        raise ParseError("not UTF-8", path=path) from None
    return parse_scenario(text, path=path, base_dir=os.path.dirname(os.path.abspath(path)))
