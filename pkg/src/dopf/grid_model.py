"""Feeder model ingestion and the grid matrices derived from it.

A feeder is described by a single JSON document (see ``docs/model-format.md``).
Every physical (bus, phase) pair is one node; the first declared node is the
root (slack) bus. All electrical quantities are per-unit on the base declared
in the document.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .exceptions import NonRadialTopology, ParseError, SingularMatrix, ValidationError

DEFAULT_TAU = 0.00625


@dataclass(frozen=True)
class Line:
    id: str
    from_node: str
    to_node: str
    y: complex
    shunt: complex = 0j  # total line charging, split half per end
    ampacity: float | None = None


@dataclass(frozen=True)
class FlexibleLoad:
    id: str
    node: str
    rating: float
    p_min: float
    p_max: float
    nominal: float = 0.0  # reference shed


@dataclass(frozen=True)
class CapBank:
    id: str
    node: str
    rating: float  # nominal reactive supply
    q_min: float
    q_max: float
    step: float | None = None


@dataclass(frozen=True)
class Regulator:
    id: str
    line: str
    tap: float = 0.0
    tap_min: float = -16.0
    tap_max: float = 16.0
    tau: float = DEFAULT_TAU


@dataclass(frozen=True)
class PVUnit:
    """PV inverter; its active control is curtailment in ``[0, p_rating]``."""

    id: str
    node: str
    p_rating: float
    q_min: float
    q_max: float
    q_nominal: float = 0.0


@dataclass(frozen=True)
class DeviceSet:
    flexible_loads: tuple[FlexibleLoad, ...] = ()
    cap_banks: tuple[CapBank, ...] = ()
    regulators: tuple[Regulator, ...] = ()
    pv_units: tuple[PVUnit, ...] = ()

    @property
    def tau(self) -> float:
        if not self.regulators:
            return DEFAULT_TAU
        return self.regulators[0].tau


@dataclass(frozen=True)
class NetworkModel:
    """Validated feeder. Immutable; index 0 of ``nodes`` is the root."""

    nodes: tuple[str, ...]
    base_voltage: complex
    lines: tuple[Line, ...]
    base_load: tuple[complex, ...]  # consumption p + jq per non-root node
    devices: DeviceSet = field(default_factory=DeviceSet)
    v_min: tuple[float, ...] = ()
    v_max: tuple[float, ...] = ()
    node_shunts: tuple[complex, ...] = ()
    name: str = ""
    base_kv: float | None = None
    base_mva: float | None = None

    @property
    def n(self) -> int:
        """Number of non-root nodes."""
        return len(self.nodes) - 1

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def node_index(self) -> dict[str, int]:
        return {nid: k for k, nid in enumerate(self.nodes)}

    @property
    def line_index(self) -> dict[str, int]:
        return {ln.id: k for k, ln in enumerate(self.lines)}

    @property
    def s_cl(self) -> np.ndarray:
        return np.array(self.base_load, dtype=complex)

    def with_operating_point(self, load_scale=1.0, pv_available=None, load_delta=None):
        """Copy of the model at another loading condition.

        ``pv_available`` maps PV ids to a new available active power;
        ``load_delta`` maps node ids to an additive complex load change.
        """
        loads = [complex(s) * load_scale for s in self.base_load]
        idx = self.node_index
        for nid, ds in (load_delta or {}).items():
            if nid not in idx or idx[nid] == 0:
                raise ValidationError(f"load_delta refers to unknown or root node '{nid}'")
            loads[idx[nid] - 1] += complex(*ds) if isinstance(ds, (list, tuple)) else complex(ds)
        pvs = self.devices.pv_units
        if pv_available:
            unknown = set(pv_available) - {pv.id for pv in pvs}
            if unknown:
                raise ValidationError(f"unknown PV unit(s) {sorted(unknown)}")
            pvs = tuple(replace(pv, p_rating=float(pv_available.get(pv.id, pv.p_rating))) for pv in pvs)
        return replace(self, base_load=tuple(loads), devices=replace(self.devices, pv_units=pvs))


@dataclass(frozen=True, eq=False)
class AdmittanceModel:
    """Split nodal admittance blocks and the line admittance map."""

    Y: np.ndarray
    Y00: complex
    Y0L: np.ndarray  # (n,)
    YL0: np.ndarray  # (n,)
    YLL: np.ndarray  # (n, n)
    Yline_0: np.ndarray  # (m,)
    Yline_L: np.ndarray  # (m, n)
    lu: tuple = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.YLL.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``YLL x = rhs`` with the cached factorization."""
        return sla.lu_solve(self.lu, rhs)

    @property
    def Z(self) -> np.ndarray:
        return self.solve(np.eye(self.n, dtype=complex))


@dataclass(frozen=True, eq=False)
class IncidenceMaps:
    I_fl: np.ndarray
    I_cb: np.ndarray
    I_pv: np.ndarray
    C_r: np.ndarray


# ---------------------------------------------------------------------------
# parsing


def _line_of(text: str, needle: str, occurrence: int = 1) -> int | None:
    pos = -1
    for _ in range(occurrence):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


def _complex(value, fieldname, text):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(float(value), 0.0)
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        return complex(float(value[0]), float(value[1]))
    raise ParseError(f"expected a number or [re, im] pair, got {value!r}", field=fieldname,
                     line=_line_of(text, f'"{fieldname.split(".")[-1]}"'))


def _number(obj, key, fieldname, text, default=None, required=False):
    if key not in obj:
        if required:
            raise ParseError("missing required key", field=fieldname, line=None)
        return default
    val = obj[key]
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"expected a number, got {val!r}", field=fieldname,
                         line=_line_of(text, f'"{key}"'))
    return float(val)


def _require(obj, key, fieldname, text, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError("missing required key", field=fieldname)
    val = obj[key]
    if not isinstance(val, kind):
        raise ParseError(f"expected {kind.__name__ if isinstance(kind, type) else kind}, got {type(val).__name__}",
                         field=fieldname, line=_line_of(text, f'"{key}"'))
    return val


def parse_network(text: str, path=None) -> NetworkModel:
    """Parse and validate a feeder document given as a string."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object", line=1, path=path)
    try:
        net = _build(doc, text)
    except ParseError as exc:
        if exc.path is None and path is not None:
            raise ParseError(exc.reason, line=exc.line, field=exc.field, path=path) from None
        raise
    validate_network(net, text)
    return net


def load_network(path) -> NetworkModel:
    """Read a feeder JSON file into a validated :class:`NetworkModel`."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("file not found", path=p) from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 ({exc.reason})", path=p) from None
    return parse_network(text, path=p)


def _build(doc: dict, text: str) -> NetworkModel:
    nodes_raw = _require(doc, "nodes", "nodes", text, list)
    if not nodes_raw:
        raise ParseError("at least one node is required", field="nodes", line=_line_of(text, '"nodes"'))
    nodes, shunts = [], []
    for k, nd in enumerate(nodes_raw):
        if isinstance(nd, str):
            nodes.append(nd)
            shunts.append(0j)
            continue
        nid = _require(nd, "id", f"nodes[{k}].id", text, str)
        nodes.append(nid)
        shunts.append(_complex(nd.get("shunt", 0.0), f"nodes[{k}].shunt", text))

    base_voltage = _complex(doc.get("base_voltage", 1.0), "base_voltage", text)

    lines = []
    for k, ln in enumerate(_require(doc, "lines", "lines", text, list)):
        fname = f"lines[{k}]"
        lid = ln.get("id", f"l{k}") if isinstance(ln, dict) else None
        src = _require(ln, "from", f"{fname}.from", text, str)
        dst = _require(ln, "to", f"{fname}.to", text, str)
        if "y" in ln:
            y = _complex(ln["y"], f"{fname}.y", text)
        elif "z" in ln:
            z = _complex(ln["z"], f"{fname}.z", text)
            if z == 0:
                raise ValidationError(f"line '{lid}' has zero impedance", line=_line_of(text, f'"{lid}"'))
            y = 1.0 / z
        else:
            raise ParseError("line needs 'y' (admittance) or 'z' (impedance)", field=fname,
                             line=_line_of(text, f'"{lid}"'))
        shunt = _complex(ln.get("shunt", 0.0), f"{fname}.shunt", text)
        amp = _number(ln, "ampacity", f"{fname}.ampacity", text)
        lines.append(Line(str(lid), src, dst, y, shunt, amp))

    idx = {nid: k for k, nid in enumerate(nodes)}
    base_load = [0j] * (len(nodes) - 1)
    bl = doc.get("base_load", {})
    if not isinstance(bl, dict):
        raise ParseError("expected an object mapping node id to [p, q]", field="base_load",
                         line=_line_of(text, '"base_load"'))
    for nid, val in bl.items():
        if nid not in idx:
            raise ValidationError(f"base_load refers to unknown node '{nid}'", line=_line_of(text, f'"{nid}"'))
        if idx[nid] == 0:
            raise ValidationError(f"base_load on root node '{nid}'", line=_line_of(text, f'"{nid}"'))
        base_load[idx[nid] - 1] = _complex(val, f"base_load.{nid}", text)

    devices = _build_devices(doc.get("devices", {}), text)

    limits = doc.get("limits", {}) or {}
    vmin_d = _number(limits, "v_min", "limits.v_min", text, 0.95)
    vmax_d = _number(limits, "v_max", "limits.v_max", text, 1.05)
    v_min = [vmin_d] * (len(nodes) - 1)
    v_max = [vmax_d] * (len(nodes) - 1)
    for nid, ov in (limits.get("nodes", {}) or {}).items():
        if nid not in idx or idx[nid] == 0:
            raise ValidationError(f"limits refer to unknown load node '{nid}'", line=_line_of(text, f'"{nid}"'))
        k = idx[nid] - 1
        v_min[k] = _number(ov, "v_min", f"limits.nodes.{nid}.v_min", text, v_min[k])
        v_max[k] = _number(ov, "v_max", f"limits.nodes.{nid}.v_max", text, v_max[k])

    base = doc.get("base", {}) or {}
    return NetworkModel(
        nodes=tuple(nodes),
        base_voltage=base_voltage,
        lines=tuple(lines),
        base_load=tuple(base_load),
        devices=devices,
        v_min=tuple(v_min),
        v_max=tuple(v_max),
        node_shunts=tuple(shunts),
        name=str(doc.get("name", "")),
        base_kv=_number(base, "kv", "base.kv", text),
        base_mva=_number(base, "mva", "base.mva", text),
    )


def _build_devices(dev: dict, text: str) -> DeviceSet:
    if not isinstance(dev, dict):
        raise ParseError("expected an object", field="devices", line=_line_of(text, '"devices"'))
    known = {"flexible_loads", "cap_banks", "regulators", "pv_units"}
    extra = set(dev) - known
    if extra:
        key = sorted(extra)[0]
        raise ParseError(f"unknown device section '{key}'", field=f"devices.{key}", line=_line_of(text, f'"{key}"'))

    def num(d, key, fname, default=None, required=False):
        if required and key not in d:
            raise ParseError("missing required key", field=fname, line=_line_of(text, f'"{d.get("id", "")}"'))
        return _number(d, key, fname, text, default)

    fl = []
    for k, d in enumerate(dev.get("flexible_loads", [])):
        f = f"devices.flexible_loads[{k}]"
        rating = num(d, "rating", f + ".rating", required=True)
        fl.append(FlexibleLoad(
            id=str(d.get("id", f"fl{k}")),
            node=_require(d, "node", f + ".node", text, str),
            rating=rating,
            p_min=num(d, "p_min", f + ".p_min", 0.0),
            p_max=num(d, "p_max", f + ".p_max", rating),
            nominal=num(d, "nominal", f + ".nominal", 0.0),
        ))
    cb = []
    for k, d in enumerate(dev.get("cap_banks", [])):
        f = f"devices.cap_banks[{k}]"
        rating = num(d, "rating", f + ".rating", required=True)
        cb.append(CapBank(
            id=str(d.get("id", f"cb{k}")),
            node=_require(d, "node", f + ".node", text, str),
            rating=rating,
            q_min=num(d, "q_min", f + ".q_min", 0.0),
            q_max=num(d, "q_max", f + ".q_max", rating),
            step=num(d, "step", f + ".step", None),
        ))
    rg = []
    for k, d in enumerate(dev.get("regulators", [])):
        f = f"devices.regulators[{k}]"
        rg.append(Regulator(
            id=str(d.get("id", f"rg{k}")),
            line=_require(d, "line", f + ".line", text, str),
            tap=num(d, "tap", f + ".tap", 0.0),
            tap_min=num(d, "tap_min", f + ".tap_min", -16.0),
            tap_max=num(d, "tap_max", f + ".tap_max", 16.0),
            tau=num(d, "tau", f + ".tau", DEFAULT_TAU),
        ))
    pv = []
    for k, d in enumerate(dev.get("pv_units", [])):
        f = f"devices.pv_units[{k}]"
        pv.append(PVUnit(
            id=str(d.get("id", f"pv{k}")),
            node=_require(d, "node", f + ".node", text, str),
            p_rating=num(d, "p_rating", f + ".p_rating", required=True),
            q_min=num(d, "q_min", f + ".q_min", 0.0),
            q_max=num(d, "q_max", f + ".q_max", 0.0),
            q_nominal=num(d, "q_nominal", f + ".q_nominal", 0.0),
        ))
    return DeviceSet(tuple(fl), tuple(cb), tuple(rg), tuple(pv))


def validate_network(net: NetworkModel, text: str = "") -> None:
    """Raise :class:`ValidationError` if ``net`` breaks a model invariant."""

    def fail(msg, token=None, occurrence=1):
        raise ValidationError(msg, line=_line_of(text, f'"{token}"', occurrence) if token and text else None)

    seen = set()
    for nid in net.nodes:
        if nid in seen:
            fail(f"duplicate node id '{nid}'", nid, occurrence=2)
        seen.add(nid)
    if not abs(net.base_voltage) > 0:
        fail("base_voltage magnitude must be positive", "base_voltage")
    idx = net.node_index
    line_ids = set()
    for ln in net.lines:
        if ln.id in line_ids:
            fail(f"duplicate line id '{ln.id}'", ln.id, occurrence=2)
        line_ids.add(ln.id)
        for end in (ln.from_node, ln.to_node):
            if end not in idx:
                fail(f"line '{ln.id}' refers to unknown node '{end}'", end)
        if ln.from_node == ln.to_node:
            fail(f"line '{ln.id}' is a self-loop", ln.id)
        if ln.y == 0:
            fail(f"line '{ln.id}' has zero admittance", ln.id)
        if ln.ampacity is not None and not ln.ampacity > 0:
            fail(f"line '{ln.id}' ampacity must be positive", ln.id)

    adj = _adjacency(net)
    reached = _bfs_order(adj, 0)
    if len(reached) != len(net.nodes):
        missing = [net.nodes[k] for k in range(len(net.nodes)) if k not in set(reached)]
        fail(f"network is disconnected: node '{missing[0]}' is not reachable from root", missing[0])

    for a, b, nid in zip(net.v_min, net.v_max, net.nodes[1:]):
        if not a < b:
            fail(f"voltage limits at '{nid}' need v_min < v_max", nid)

    dev = net.devices

    def check_node(kind, d):
        if d.node not in idx:
            fail(f"{kind} '{d.id}' refers to unknown node '{d.node}'", d.node)
        if idx[d.node] == 0:
            fail(f"{kind} '{d.id}' sits on the root node", d.id)

    def check_box(kind, d, lo, nom, hi):
        if not (lo <= nom <= hi):
            fail(f"{kind} '{d.id}' box violation: need {lo} <= {nom} <= {hi}", d.id)

    dev_ids = set()
    for group in (dev.flexible_loads, dev.cap_banks, dev.regulators, dev.pv_units):
        for d in group:
            if d.id in dev_ids:
                fail(f"duplicate device id '{d.id}'", d.id, occurrence=2)
            dev_ids.add(d.id)
    for d in dev.flexible_loads:
        check_node("flexible load", d)
        check_box("flexible load", d, d.p_min, d.nominal, d.p_max)
    for d in dev.cap_banks:
        check_node("cap bank", d)
        check_box("cap bank", d, d.q_min, d.rating, d.q_max)
        if d.step is not None and not d.step > 0:
            fail(f"cap bank '{d.id}' step must be positive", d.id)
    for d in dev.regulators:
        if d.line not in line_ids:
            fail(f"regulator '{d.id}' refers to unknown line '{d.line}'", d.line)
        check_box("regulator", d, d.tap_min, d.tap, d.tap_max)
        if not d.tau > 0:
            fail(f"regulator '{d.id}' needs tau > 0", d.id)
    for d in dev.pv_units:
        check_node("PV unit", d)
        if d.p_rating < 0:
            fail(f"PV unit '{d.id}' p_rating must be non-negative", d.id)
        check_box("PV unit", d, d.q_min, d.q_nominal, d.q_max)


def network_to_dict(net: NetworkModel) -> dict:
    """Inverse of the parser: a JSON-ready document for ``net``."""

    def cx(z):
        return [z.real, z.imag]

    nodes = []
    for nid, sh in zip(net.nodes, net.node_shunts or (0j,) * len(net.nodes)):
        nodes.append({"id": nid, "shunt": cx(sh)} if sh != 0 else {"id": nid})
    lines = []
    for ln in net.lines:
        d = {"id": ln.id, "from": ln.from_node, "to": ln.to_node, "y": cx(ln.y)}
        if ln.shunt != 0:
            d["shunt"] = cx(ln.shunt)
        if ln.ampacity is not None:
            d["ampacity"] = ln.ampacity
        lines.append(d)
    dev = net.devices
    devices = {
        "flexible_loads": [
            {"id": d.id, "node": d.node, "rating": d.rating, "p_min": d.p_min, "p_max": d.p_max,
             "nominal": d.nominal} for d in dev.flexible_loads],
        "cap_banks": [
            {"id": d.id, "node": d.node, "rating": d.rating, "q_min": d.q_min, "q_max": d.q_max,
             "step": d.step} for d in dev.cap_banks],
        "regulators": [
            {"id": d.id, "line": d.line, "tap": d.tap, "tap_min": d.tap_min, "tap_max": d.tap_max,
             "tau": d.tau} for d in dev.regulators],
        "pv_units": [
            {"id": d.id, "node": d.node, "p_rating": d.p_rating, "q_min": d.q_min, "q_max": d.q_max,
             "q_nominal": d.q_nominal} for d in dev.pv_units],
    }
    vmin0, vmax0 = (net.v_min[0], net.v_max[0]) if net.n else (0.95, 1.05)
    overrides = {}
    for nid, a, b in zip(net.nodes[1:], net.v_min, net.v_max):
        o = {}
        if a != vmin0:
            o["v_min"] = a
        if b != vmax0:
            o["v_max"] = b
        if o:
            overrides[nid] = o
    limits = {"v_min": vmin0, "v_max": vmax0}
    if overrides:
        limits["nodes"] = overrides
    doc = {
        "name": net.name,
        "base": {"kv": net.base_kv, "mva": net.base_mva},
        "base_voltage": cx(net.base_voltage),
        "nodes": nodes,
        "lines": lines,
        "base_load": {nid: cx(s) for nid, s in zip(net.nodes[1:], net.base_load) if s != 0},
        "devices": devices,
        "limits": limits,
    }
    return doc


def dump_network(net: NetworkModel) -> str:
    return json.dumps(network_to_dict(net), indent=2)


# ---------------------------------------------------------------------------
# matrices


def _adjacency(net: NetworkModel) -> list[list[tuple[int, int]]]:
    idx = net.node_index
    adj = [[] for _ in net.nodes]
    for k, ln in enumerate(net.lines):
        if ln.from_node in idx and ln.to_node in idx:
            a, b = idx[ln.from_node], idx[ln.to_node]
            adj[a].append((b, k))
            adj[b].append((a, k))
    return adj


def _bfs_order(adj, root):
    seen = {root}
    order = [root]
    q = deque([root])
    while q:
        u = q.popleft()
        for v, _ in adj[u]:
            if v not in seen:
                seen.add(v)
                order.append(v)
                q.append(v)
    return order


def build_admittance(net: NetworkModel) -> AdmittanceModel:
    """Assemble the nodal admittance matrix and split it at the root."""
    N = len(net.nodes)
    idx = net.node_index
    Y = np.zeros((N, N), dtype=complex)
    Yline = np.zeros((net.m, N), dtype=complex)
    for k, ln in enumerate(net.lines):
        f, t = idx[ln.from_node], idx[ln.to_node]
        half = ln.shunt / 2
        Y[f, f] += ln.y + half
        Y[t, t] += ln.y + half
        Y[f, t] -= ln.y
        Y[t, f] -= ln.y
        # sending-end current
        Yline[k, f] = ln.y + half
        Yline[k, t] = -ln.y
    for k, sh in enumerate(net.node_shunts):
        Y[k, k] += sh
    YLL = Y[1:, 1:].copy()
    if YLL.size:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(YLL, check_finite=True)
        d = np.abs(np.diag(lu[0]))
        if d.min() <= 1e-13 * max(d.max(), 1.0):
            raise SingularMatrix("YLL is singular (floating subnetwork or zero admittances)")
    else:
        lu = (YLL, np.zeros(0, dtype=np.int32))
    return AdmittanceModel(
        Y=Y, Y00=complex(Y[0, 0]), Y0L=Y[0, 1:].copy(), YL0=Y[1:, 0].copy(), YLL=YLL,
        Yline_0=Yline[:, 0].copy(), Yline_L=Yline[:, 1:].copy(), lu=lu,
    )


def tree_parents(net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """Parent node and parent line of every node in a radial network (-1 at root)."""
    if net.m != len(net.nodes) - 1:
        raise NonRadialTopology(f"network has {net.m} lines for {len(net.nodes)} nodes; a tree needs "
                                f"{len(net.nodes) - 1}")
    adj = _adjacency(net)
    parent = np.full(len(net.nodes), -1)
    pline = np.full(len(net.nodes), -1)
    seen = {0}
    q = deque([0])
    while q:
        u = q.popleft()
        for v, k in adj[u]:
            if v in seen:
                continue
            seen.add(v)
            parent[v] = u
            pline[v] = k
            q.append(v)
    if len(seen) != len(net.nodes):
        raise NonRadialTopology("network is not a connected tree")
    return parent, pline


def build_incidence(net: NetworkModel, require_radial: bool = True) -> IncidenceMaps:
    """Device placement matrices and the regulator downstream map ``C_r``.

    ``C_r[i, j] = 1`` when regulator ``j`` sits on the root-to-node path of
    load node ``i``.
    """
    n = net.n
    idx = net.node_index
    dev = net.devices

    def placement(group):
        M = np.zeros((n, len(group)))
        for j, d in enumerate(group):
            M[idx[d.node] - 1, j] = 1.0
        return M

    C_r = np.zeros((n, len(dev.regulators)))
    if dev.regulators or require_radial:
        parent, pline = tree_parents(net)
        reg_col = {}
        lidx = net.line_index
        for j, r in enumerate(dev.regulators):
            reg_col.setdefault(lidx[r.line], []).append(j)
        for i in range(1, len(net.nodes)):
            u = i
            while u > 0:
                for j in reg_col.get(pline[u], ()):
                    C_r[i - 1, j] = 1.0
                u = parent[u]
    return IncidenceMaps(
        I_fl=placement(dev.flexible_loads),
        I_cb=placement(dev.cap_banks),
        I_pv=placement(dev.pv_units),
        C_r=C_r,
    )


# ---------------------------------------------------------------------------
# synthetic fixtures


def random_radial_network(rng: np.random.Generator, n_nodes: int = 10, *, devices: bool = True,
                          load_scale: float = 1.0, name: str = "random") -> NetworkModel:
    """Random tree feeder for property tests and benchmarks."""
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    nodes = tuple(f"b{k}" for k in range(n_nodes))
    lines = []
    for k in range(1, n_nodes):
        parent = int(rng.integers(0, k))
        z = complex(rng.uniform(0.004, 0.02), rng.uniform(0.008, 0.04))
        lines.append(Line(f"l{k}", nodes[parent], nodes[k], 1 / z, 0j, float(rng.uniform(0.8, 2.0))))
    loads = tuple(complex(rng.uniform(0.01, 0.08), rng.uniform(0.0, 0.04)) * load_scale
                  for _ in range(n_nodes - 1))
    dev = DeviceSet()
    if devices:
        picks = rng.choice(np.arange(1, n_nodes), size=min(3, n_nodes - 1), replace=False)
        fl = (FlexibleLoad("fl0", nodes[int(picks[0])], 0.05, 0.0, 0.05),)
        cb = (CapBank("cb0", nodes[int(picks[-1])], 0.05, 0.0, 0.1, 0.05),)
        pv = (PVUnit("pv0", nodes[int(picks[len(picks) // 2])], 0.1, -0.05, 0.05),)
        reg_line = lines[int(rng.integers(0, len(lines)))].id
        rg = (Regulator("rg0", reg_line, 0.0, -8.0, 8.0),)
        dev = DeviceSet(fl, cb, rg, pv)
    return NetworkModel(
        nodes=nodes, base_voltage=1.0 + 0j, lines=tuple(lines), base_load=loads, devices=dev,
        v_min=(0.95,) * (n_nodes - 1), v_max=(1.05,) * (n_nodes - 1),
        node_shunts=(0j,) * n_nodes, name=name,
    )


def is_radial(net: NetworkModel) -> bool:
    try:
        tree_parents(net)
    except NonRadialTopology:
        return False
    return True


__all__ = [
    "AdmittanceModel", "CapBank", "DeviceSet", "FlexibleLoad", "IncidenceMaps", "Line", "NetworkModel",
    "PVUnit", "Regulator", "build_admittance", "build_incidence", "dump_network", "is_radial",
    "load_network", "network_to_dict", "parse_network", "random_radial_network", "tree_parents",
    "validate_network", "DEFAULT_TAU",
]
