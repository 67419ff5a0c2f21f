"""Cost, limits and the assembled quadratic program.

Decision layout follows :class:`~dopf.controls.ControlVector`::

    x = [p_fl, q_cb, t_rg, p_pv (curtailment), q_pv, p0, q0]

The program is ``min 1/2 x'Hx + c'x + const`` with diagonal ``H``, subject to

* ``A x = b`` - active and reactive balance, ``p0 = demand(x) + losses(x)``;
* ``G x <= h`` - linearized voltage and current magnitude limits;
* ``lo <= x <= hi`` - device boxes (``p0``/``q0`` free).

The Lagrangian used throughout the package is
``L = f(x) - lam'(A x - b) + mu'(G x - h)``, so that ``p0 = (lam_p - c_a_p0) / c_b_p0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from ..controls import ControlVector, control_bounds, nominal_controls
from ..exceptions import NonConvex, ParseError, ShapeMismatch, ValidationError
from ..grid_model import NetworkModel
from ..linearization import SensitivityModel, injection_maps, state_matrices
from ..power_flow import PowerFlowState


@dataclass(frozen=True, eq=False)
class CostModel:
    """Quadratic deviation costs around rated references.

    ``f = c_a_fl'(p_fl - r) + 1/2 (p_fl - r)' C_b_fl (p_fl - r)
          + 1/2 |q_cb - r|^2_C_b_cb + 1/2 |t_rg - r|^2_C_b_rg
          + c_a_pv' p_pv + 1/2 |p_pv|^2_C_b_pv + 1/2 |q_pv - r|^2_C_b_qpv
          + c_a_p0 p0 + 1/2 c_b_p0 p0^2 + c_a_q0 q0 + 1/2 c_b_q0 q0^2``

    Diagonal matrices are stored as vectors.
    """

    c_a_fl: np.ndarray
    C_b_fl: np.ndarray
    C_b_cb: np.ndarray
    C_b_rg: np.ndarray
    c_a_pv: np.ndarray
    C_b_pv: np.ndarray
    C_b_qpv: np.ndarray
    c_a_p0: float
    c_b_p0: float
    c_a_q0: float
    c_b_q0: float
    reference: ControlVector

    def __post_init__(self):
        for name in ("c_a_fl", "C_b_fl", "C_b_cb", "C_b_rg", "c_a_pv", "C_b_pv", "C_b_qpv"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel())
        for name in ("c_a_p0", "c_b_p0", "c_a_q0", "c_b_q0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        nfl, ncb, nrg, npv = self.reference.sizes
        expect = {"c_a_fl": nfl, "C_b_fl": nfl, "C_b_cb": ncb, "C_b_rg": nrg,
                  "c_a_pv": npv, "C_b_pv": npv, "C_b_qpv": npv}
        for name, k in expect.items():
            if getattr(self, name).shape != (k,):
                raise ShapeMismatch(f"{name} has {getattr(self, name).size} entries, expected {k}")

    def quadratic(self) -> np.ndarray:
        return np.concatenate([self.C_b_fl, self.C_b_cb, self.C_b_rg, self.C_b_pv, self.C_b_qpv,
                               [self.c_b_p0, self.c_b_q0]])

    def check_convex(self):
        quad = self.quadratic()
        if quad.size and not np.all(quad > 0):
            k = int(np.flatnonzero(~(quad > 0))[0])
            raise NonConvex(f"quadratic cost coefficient {k} is {quad[k]:.6g}; all must be positive")

    def scaled(self, factor: float) -> "CostModel":
        kw = {name: getattr(self, name) * factor for name in (
            "c_a_fl", "C_b_fl", "C_b_cb", "C_b_rg", "c_a_pv", "C_b_pv", "C_b_qpv",
            "c_a_p0", "c_b_p0", "c_a_q0", "c_b_q0")}
        return replace(self, **kw)

    def evaluate(self, u: ControlVector) -> float:
        r = self.reference
        d_fl = u.p_fl - r.p_fl
        d_cb = u.q_cb - r.q_cb
        d_rg = u.t_rg - r.t_rg
        d_qpv = u.q_pv - r.q_pv
        f = self.c_a_fl @ d_fl + 0.5 * d_fl @ (self.C_b_fl * d_fl)
        f += 0.5 * d_cb @ (self.C_b_cb * d_cb) + 0.5 * d_rg @ (self.C_b_rg * d_rg)
        f += self.c_a_pv @ u.p_pv + 0.5 * u.p_pv @ (self.C_b_pv * u.p_pv)
        f += 0.5 * d_qpv @ (self.C_b_qpv * d_qpv)
        f += self.c_a_p0 * u.p0 + 0.5 * self.c_b_p0 * u.p0 ** 2
        f += self.c_a_q0 * u.q0 + 0.5 * self.c_b_q0 * u.q0 ** 2
        return float(f)


# Per-unit defaults, tuned so the dual iteration with steps of 0.05 is well
# conditioned on the bundled feeders.
DEFAULT_COSTS = {
    "c_a_fl": 0.1, "C_b_fl": 1.0, "C_b_cb": 0.5, "C_b_rg": 1e-4,
    "c_a_pv": 0.05, "C_b_pv": 1.0, "C_b_qpv": 0.1,
    "c_b_p0": 1.0, "c_b_q0": 1.0,
}


def default_costs(net: NetworkModel, s0_hat: complex = 0j, overrides: dict | None = None) -> CostModel:
    """Cost model with the defaults above.

    Unless given explicitly, the linear feed-in coefficients are centered on
    the root injection ``s0_hat`` of the linearization point
    (``c_a_p0 = -c_b_p0 * Re s0_hat``), so the balance multipliers are zero
    when nothing needs to change.
    """
    o = dict(DEFAULT_COSTS)
    o.update(overrides or {})
    nfl, ncb, nrg, npv = (len(net.devices.flexible_loads), len(net.devices.cap_banks),
                          len(net.devices.regulators), len(net.devices.pv_units))

    def vec(key, k):
        val = np.asarray(o[key], dtype=float)
        return np.full(k, float(val)) if val.ndim == 0 else val

    c_b_p0, c_b_q0 = float(o["c_b_p0"]), float(o["c_b_q0"])
    return CostModel(
        c_a_fl=vec("c_a_fl", nfl), C_b_fl=vec("C_b_fl", nfl), C_b_cb=vec("C_b_cb", ncb),
        C_b_rg=vec("C_b_rg", nrg), c_a_pv=vec("c_a_pv", npv), C_b_pv=vec("C_b_pv", npv),
        C_b_qpv=vec("C_b_qpv", npv),
        c_a_p0=float(o.get("c_a_p0", -c_b_p0 * complex(s0_hat).real)), c_b_p0=c_b_p0,
        c_a_q0=float(o.get("c_a_q0", -c_b_q0 * complex(s0_hat).imag)), c_b_q0=c_b_q0,
        reference=nominal_controls(net),
    )


@dataclass(frozen=True, eq=False)
class LimitSet:
    """Voltage / current magnitude limits and device boxes."""

    v_lo: np.ndarray
    v_hi: np.ndarray
    i_hi: np.ndarray
    box_lo: ControlVector
    box_hi: ControlVector
    i_lo: np.ndarray = None

    def __post_init__(self):
        for name in ("v_lo", "v_hi", "i_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel())
        if self.i_lo is None:
            object.__setattr__(self, "i_lo", np.zeros_like(self.i_hi))
        if self.v_lo.shape != self.v_hi.shape:
            raise ShapeMismatch("v_lo and v_hi differ in length")
        if np.any(self.v_lo >= self.v_hi):
            raise ValidationError("v_lo must be below v_hi at every node")
        if np.any(~(self.i_hi > 0)):
            raise ValidationError("current limits must be positive")

    @classmethod
    def from_network(cls, net: NetworkModel) -> "LimitSet":
        lo, hi = control_bounds(net)
        amp = [np.inf if ln.ampacity is None else ln.ampacity for ln in net.lines]
        return cls(np.array(net.v_min), np.array(net.v_max), np.array(amp), lo, hi)

    def with_voltage(self, v_lo=None, v_hi=None) -> "LimitSet":
        n = self.v_lo.size
        return replace(self,
                       v_lo=self.v_lo if v_lo is None else np.broadcast_to(v_lo, (n,)).astype(float),
                       v_hi=self.v_hi if v_hi is None else np.broadcast_to(v_hi, (n,)).astype(float))


@dataclass(frozen=True, eq=False)
class QPProblem:
    """``min 1/2 x'diag(H)x + c'x + const`` s.t. ``Ax = b``, ``Gx <= h``, ``lo <= x <= hi``.

    ``G`` stacks the rows ``[v_hi; v_lo; i_hi; i_lo]``; ``row_kind`` and
    ``row_index`` label each row with its block and node/line. Rows whose limit
    is infinite are left out.
    """

    H: np.ndarray
    c: np.ndarray
    const: float
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sizes: tuple
    row_kind: np.ndarray
    row_index: np.ndarray
    n_nodes: int
    n_lines: int
    meta: dict = field(default_factory=dict)

    @property
    def n_var(self) -> int:
        return self.H.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H * x) + self.c @ x + self.const)

    def to_controls(self, x) -> ControlVector:
        return ControlVector.from_array(x, self.sizes)

    def violation(self, x) -> float:
        """Largest constraint violation (balance, limits and boxes)."""
        x = np.asarray(x, dtype=float)
        parts = [0.0]
        if self.A.size:
            parts.append(np.max(np.abs(self.A @ x - self.b)))
        if self.G.size:
            parts.append(np.max(self.G @ x - self.h))
        parts.append(np.max(self.lo - x, initial=0.0))
        parts.append(np.max(x - self.hi, initial=0.0))
        return float(max(parts))


ROW_KINDS = ("v_hi", "v_lo", "i_hi", "i_lo")


def assemble_qp(sens: SensitivityModel, cost: CostModel, limits: LimitSet,
                base: PowerFlowState | None = None) -> QPProblem:
    """Build the QP over the linear model held in ``sens``."""
    base = sens.base if base is None else base
    cost.check_convex()
    sizes = sens.base_controls.sizes
    if cost.reference.sizes != sizes or limits.box_lo.sizes != sizes:
        raise ShapeMismatch("cost / limit device counts do not match the sensitivity model")
    if limits.v_lo.size != sens.n or limits.i_hi.size != sens.m:
        raise ShapeMismatch("limit vectors do not match the network size")

    nv = sum(sizes) + sizes[3] + 2
    x_b = sens.base_controls.to_array()
    ref = cost.reference.to_array()
    H = cost.quadratic()
    lin = np.concatenate([cost.c_a_fl, np.zeros(sizes[1] + sizes[2]), cost.c_a_pv, np.zeros(sizes[3]),
                          [cost.c_a_p0, cost.c_a_q0]])
    # the p0/q0 and p_pv terms have no reference shift
    shift = ref.copy()
    shift[-2:] = 0.0
    nfl, ncb, nrg, npv = sizes
    shift[nfl + ncb + nrg:nfl + ncb + nrg + npv] = 0.0
    c = lin - H * shift
    const = float(0.5 * shift @ (H * shift) - lin @ shift)

    V, I, lp, lq = state_matrices(sens)
    P, Q = injection_maps(sens.maps, sizes)
    # demand(x) = -sum(Re s_L(x)) + losses(x), affine around x_b
    s_b = base.s_L
    dem_p0 = -s_b.real.sum() + sens.c_hat
    dem_q0 = -s_b.imag.sum() + sens.d_hat
    g_p = -P.sum(axis=0) + lp
    g_q = -Q.sum(axis=0) + lq
    A = np.zeros((2, nv))
    A[0] = -g_p
    A[1] = -g_q
    A[0, -2] += 1.0
    A[1, -1] += 1.0
    b = np.array([dem_p0 - g_p @ x_b, dem_q0 - g_q @ x_b])

    v0 = sens.a_hat - V @ x_b
    i0 = sens.b_hat - I @ x_b
    blocks = [
        (V, limits.v_hi - v0, "v_hi"),
        (-V, -(limits.v_lo - v0), "v_lo"),
        (I, limits.i_hi - i0, "i_hi"),
        (-I, -(limits.i_lo - i0), "i_lo"),
    ]
    rows, rhs, kind, index = [], [], [], []
    for k, (M, r, name) in enumerate(blocks):
        keep = np.isfinite(r)
        rows.append(M[keep])
        rhs.append(r[keep])
        kind.append(np.full(keep.sum(), k))
        index.append(np.flatnonzero(keep))
    G = np.vstack(rows) if rows else np.zeros((0, nv))
    return QPProblem(
        H=H, c=c, const=const, A=A, b=b, G=G.reshape(-1, nv), h=np.concatenate(rhs),
        lo=limits.box_lo.to_array(), hi=limits.box_hi.to_array(), sizes=sizes,
        row_kind=np.concatenate(kind), row_index=np.concatenate(index),
        n_nodes=sens.n, n_lines=sens.m,
        # start the feed-in at the demand it has to cover
        meta={"x_base": np.concatenate([x_b[:-2], [dem_p0, dem_q0]])},
    )


# ---------------------------------------------------------------------------
# problem files


@dataclass(frozen=True)
class ProblemSpec:
    """Operating point, cost overrides, limit overrides and solver settings read from JSON."""

    load_scale: float = 1.0
    pv_available: dict = field(default_factory=dict)
    load_delta: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    v_min: float | None = None
    v_max: float | None = None
    solver: dict = field(default_factory=dict)
    name: str = "problem"

    def apply(self, net: NetworkModel) -> NetworkModel:
        net = net.with_operating_point(self.load_scale, self.pv_available or None, self.load_delta or None)
        if self.v_min is not None or self.v_max is not None:
            n = net.n
            net = replace(net,
                          v_min=net.v_min if self.v_min is None else (float(self.v_min),) * n,
                          v_max=net.v_max if self.v_max is None else (float(self.v_max),) * n)
        return net


def parse_problem(text: str, path=None) -> ProblemSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(doc, dict):
        raise ParseError("problem file must hold a JSON object", line=1, path=path)
    op = doc.get("operating_point", {})
    lim = doc.get("limits", {})
    try:
        return ProblemSpec(
            load_scale=float(op.get("load_scale", 1.0)),
            pv_available={k: float(v) for k, v in op.get("pv_available", {}).items()},
            load_delta={k: complex(*v) for k, v in op.get("load_delta", {}).items()},
            costs=dict(doc.get("costs", {})),
            v_min=lim.get("v_min"), v_max=lim.get("v_max"),
            solver=dict(doc.get("solver", {})),
            name=str(doc.get("name", "problem")),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad problem field: {exc}", path=path) from None


def load_problem(path) -> ProblemSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ParseError("file not found", path=path) from None
    except UnicodeDecodeError:
        raise ParseError("not UTF-8", path=path) from None
    return parse_problem(text, path)
