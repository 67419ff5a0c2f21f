"""Round relaxed tap / capacitor setpoints to their discrete steps and re-check them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..controls import ControlVector, clip_to_box
from ..exceptions import NoConvergence
from ..grid_model import AdmittanceModel, IncidenceMaps, NetworkModel
from ..power_flow import PFConfig, line_currents, solve_controls


@dataclass
class RoundingReport:
    u_relaxed: ControlVector
    u_rounded: ControlVector
    v_max: float
    v_min: float
    violations: list = field(default_factory=list)
    converged: bool = True

    @property
    def feasible(self) -> bool:
        return self.converged and not self.violations

    def to_dict(self) -> dict:
        return {"u_rounded": self.u_rounded.to_dict(), "v_max": self.v_max, "v_min": self.v_min,
                "violations": self.violations, "converged": self.converged, "feasible": self.feasible}


def round_discrete(net: NetworkModel, u: ControlVector) -> ControlVector:
    """Nearest integer tap and nearest capacitor step (counted from ``q_min``)."""
    q_cb = u.q_cb.copy()
    for k, cb in enumerate(net.devices.cap_banks):
        if cb.step and cb.step > 0:
            q_cb[k] = cb.q_min + np.round((q_cb[k] - cb.q_min) / cb.step) * cb.step
    return clip_to_box(net, u.replace(t_rg=np.round(u.t_rg), q_cb=q_cb))


def verify_rounded(net: NetworkModel, adm: AdmittanceModel, maps: IncidenceMaps, u: ControlVector,
                   v_lo=None, v_hi=None, i_hi=None, tol: float = 1e-9,
                   cfg: PFConfig = PFConfig(tol=1e-10, max_iter=500)) -> RoundingReport:
    """Round ``u`` and evaluate the rounded setpoints with the nonlinear power flow.

    Every limit violation is listed in the report; nothing is accepted silently.
    """
    ur = round_discrete(net, u)
    v_lo = np.asarray(net.v_min if v_lo is None else v_lo, dtype=float)
    v_hi = np.asarray(net.v_max if v_hi is None else v_hi, dtype=float)
    if i_hi is None:
        i_hi = np.array([np.inf if ln.ampacity is None else ln.ampacity for ln in net.lines])
    try:
        st = solve_controls(net, adm, maps, ur, cfg)
    except NoConvergence as exc:
        return RoundingReport(u, ur, float("nan"), float("nan"), [f"power flow failed: {exc}"], False)
    vm = np.abs(st.v_L)
    im = np.abs(line_currents(adm, st))
    bad = []
    for k in np.flatnonzero(vm > v_hi + tol):
        bad.append(f"node {net.nodes[k + 1]}: |v|={vm[k]:.6f} > {v_hi[k]:.6f}")
    for k in np.flatnonzero(vm < v_lo - tol):
        bad.append(f"node {net.nodes[k + 1]}: |v|={vm[k]:.6f} < {v_lo[k]:.6f}")
    for k in np.flatnonzero(im > i_hi + tol):
        bad.append(f"line {net.lines[k].id}: |i|={im[k]:.6f} > {i_hi[k]:.6f}")
    return RoundingReport(u, ur, float(vm.max(initial=0.0)), float(vm.min(initial=0.0)), bad)
