"""Linear power flow: sensitivities of |v|, |i| and losses to injections and taps.

The complex voltage sensitivity is obtained by differentiating the fixed-point
power-flow equation ``v = w + Z diag(conj v)^-1 conj s`` at the linearization
point. Differentiating only the explicit ``conj s`` term gives the classic
first-iteration approximation ``Z diag(conj v)^-1``; ``method="exact"`` also
keeps the implicit dependence through ``conj v``, which makes the matrices the
true Jacobian of the nonlinear solution (they coincide at no load).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .controls import ControlVector, nominal_controls
from .exceptions import NoConvergence, ShapeMismatch
from .grid_model import AdmittanceModel, IncidenceMaps, NetworkModel, build_admittance, build_incidence
from .power_flow import (
    PFConfig,
    PowerFlowState,
    line_currents,
    no_load_voltage,
    nominal_taps,
    pv_available,
    regulator_taus,
    solve_controls,
    solve_fixed_point,
    total_losses,
)

# Lines whose base current magnitude is below this have no defined
# magnitude derivative; their rows fall back to |complex sensitivity|.
ZERO_CURRENT = 1e-9


@dataclass(frozen=True, eq=False)
class SensitivityModel:
    """Linear map from control deviations to grid-state magnitudes."""

    base: PowerFlowState
    base_controls: ControlVector
    a_hat: np.ndarray
    b_hat: np.ndarray
    c_hat: float
    d_hat: float
    Mv_p: np.ndarray
    Mv_q: np.ndarray
    Mi_p: np.ndarray
    Mi_q: np.ndarray
    ml_p_p: np.ndarray
    ml_q_p: np.ndarray
    ml_p_q: np.ndarray
    ml_q_q: np.ndarray
    M_r: np.ndarray
    tau: float
    maps: IncidenceMaps
    w: np.ndarray
    taus: np.ndarray = None
    p_available: np.ndarray = None
    zero_current_rows: np.ndarray = field(default=None)
    # complex voltage sensitivities, kept for re-centering and the estimator
    Mvc_p: np.ndarray = field(default=None, repr=False)
    Mvc_q: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.a_hat.shape[0]

    @property
    def m(self) -> int:
        return self.b_hat.shape[0]

    def injection_maps(self) -> tuple[np.ndarray, np.ndarray]:
        """Matrices taking the stacked control array to (dp_L, dq_L)."""
        return injection_maps(self.maps, self.base_controls.sizes)


@dataclass(frozen=True, eq=False)
class GridStateApprox:
    v_mag: np.ndarray
    i_mag: np.ndarray
    p_loss: float
    q_loss: float


def injection_maps(maps: IncidenceMaps, sizes) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps from the control array to active / reactive injection changes.

    PV curtailment reduces injection, hence the minus sign on its block.
    """
    nfl, ncb, nrg, npv = sizes
    n = maps.I_fl.shape[0]
    P = np.zeros((n, nfl + ncb + nrg + 2 * npv + 2))
    Q = np.zeros_like(P)
    o = 0
    P[:, o:o + nfl] = maps.I_fl
    o += nfl
    Q[:, o:o + ncb] = maps.I_cb
    o += ncb + nrg
    P[:, o:o + npv] = -maps.I_pv
    o += npv
    Q[:, o:o + npv] = maps.I_pv
    return P, Q


def tap_selector(sizes) -> np.ndarray:
    nfl, ncb, nrg, npv = sizes
    T = np.zeros((nrg, nfl + ncb + nrg + 2 * npv + 2))
    T[:, nfl + ncb:nfl + ncb + nrg] = np.eye(nrg)
    return T


def complex_voltage_sensitivity(adm: AdmittanceModel, v: np.ndarray, s: np.ndarray,
                                method: Literal["exact", "fixed_point"] = "exact"):
    """``(dv/dp, dv/dq)`` of the complex load voltages at the point ``(v, s)``."""
    n = adm.n
    Zd = adm.solve(np.diag(1.0 / np.conj(v)))  # Z diag(conj v)^-1
    Rp, Rq = Zd, -1j * Zd
    if method == "fixed_point":
        return Rp, Rq
    # dv - K conj(dv) = R  with  K = -Z diag(conj s / conj v^2)
    K = -adm.solve(np.diag(np.conj(s) / np.conj(v) ** 2))
    Kr, Ki = K.real, K.imag
    eye = np.eye(n)
    lhs = np.block([[eye - Kr, -Ki], [-Ki, eye + Kr]])
    rhs = np.hstack([np.vstack([Rp.real, Rp.imag]), np.vstack([Rq.real, Rq.imag])])
    sol = np.linalg.solve(lhs, rhs)
    dv = sol[:n] + 1j * sol[n:]
    return dv[:, :n], dv[:, n:]


def build_sensitivities(adm: AdmittanceModel, maps: IncidenceMaps, base: PowerFlowState,
                        tau=0.00625, base_controls: ControlVector | None = None,
                        method: Literal["exact", "fixed_point"] = "exact",
                        p_available=None) -> SensitivityModel:
    """Linearize |v|, |i| and losses around the converged state ``base``."""
    v, s, v0 = base.v_L, base.s_L, base.v0
    n = adm.n
    if maps.I_fl.shape[0] != n:
        raise ShapeMismatch("incidence maps do not match the admittance model")
    taus = np.broadcast_to(np.asarray(tau, dtype=float), (maps.C_r.shape[1],)).copy()
    Mvc_p, Mvc_q = complex_voltage_sensitivity(adm, v, s, method)

    vabs = np.abs(v)
    Mv_p = np.real(np.conj(v)[:, None] * Mvc_p) / vabs[:, None]
    Mv_q = np.real(np.conj(v)[:, None] * Mvc_q) / vabs[:, None]

    i_hat = line_currents(adm, base)
    b_hat = np.abs(i_hat)
    Mic_p = adm.Yline_L @ Mvc_p
    Mic_q = adm.Yline_L @ Mvc_q
    zero = b_hat < ZERO_CURRENT
    safe = np.where(zero, 1.0, b_hat)
    Mi_p = np.real(np.conj(i_hat)[:, None] * Mic_p) / safe[:, None]
    Mi_q = np.real(np.conj(i_hat)[:, None] * Mic_q) / safe[:, None]
    Mi_p[zero] = np.abs(Mic_p[zero])
    Mi_q[zero] = np.abs(Mic_q[zero])

    # losses s_l = vf^T conj(Y vf); d s_l = dv^T conj(I_L) + vf^T conj(Y[:, L]) conj(dv)
    vf = np.concatenate([[v0], base.v_ref])
    inj = adm.Y @ vf
    left = np.conj(inj[1:])
    right = vf @ np.conj(adm.Y[:, 1:])
    g_p = left @ Mvc_p + right @ np.conj(Mvc_p)
    g_q = left @ Mvc_q + right @ np.conj(Mvc_q)
    s_l = total_losses(adm, base)

    w = no_load_voltage(adm, v0)
    M_r = np.abs(w)[:, None] * maps.C_r * taus[None, :]

    if base_controls is None:
        sizes = (maps.I_fl.shape[1], maps.I_cb.shape[1], maps.C_r.shape[1], maps.I_pv.shape[1])
        base_controls = ControlVector(np.zeros(sizes[0]), np.zeros(sizes[1]), np.zeros(sizes[2]),
                                      np.zeros(sizes[3]), np.zeros(sizes[3]))
    return SensitivityModel(
        base=base, base_controls=base_controls, a_hat=vabs, b_hat=b_hat, c_hat=s_l.real, d_hat=s_l.imag,
        Mv_p=Mv_p, Mv_q=Mv_q, Mi_p=Mi_p, Mi_q=Mi_q,
        ml_p_p=g_p.real, ml_q_p=g_p.imag, ml_p_q=g_q.real, ml_q_q=g_q.imag,
        M_r=M_r, tau=float(taus[0]) if taus.size else float(np.asarray(tau).ravel()[0]), maps=maps, w=w,
        taus=taus, p_available=None if p_available is None else np.asarray(p_available, dtype=float),
        zero_current_rows=np.flatnonzero(zero), Mvc_p=Mvc_p, Mvc_q=Mvc_q,
    )


def linearize_network(net: NetworkModel, u: ControlVector | None = None, *, point="base",
                      method="exact", pf_cfg: PFConfig = PFConfig(tol=1e-10, max_iter=500),
                      adm=None, maps=None) -> tuple[SensitivityModel, AdmittanceModel, IncidenceMaps]:
    """Convenience: build matrices, solve the base point, linearize.

    ``point="no_load"`` linearizes at zero injections, where ``a_hat = |w|``.
    """
    adm = adm or build_admittance(net)
    maps = maps or build_incidence(net)
    u = nominal_controls(net) if u is None else u
    if point == "no_load":
        base = solve_fixed_point(adm, np.zeros(net.n, dtype=complex), net.base_voltage, pf_cfg)
    elif point == "base":
        base = solve_controls(net, adm, maps, u, pf_cfg)
    else:
        raise ValueError(f"unknown linearization point {point!r}")
    sens = build_sensitivities(adm, maps, base, regulator_taus(net) if net.devices.regulators else 0.00625,
                               base_controls=u, method=method, p_available=pv_available(net))
    return sens, adm, maps


def _check_controls(sens: SensitivityModel, u: ControlVector):
    if u.sizes != sens.base_controls.sizes:
        raise ShapeMismatch(f"control sizes {u.sizes} do not match the model {sens.base_controls.sizes}")


def state_matrices(sens: SensitivityModel):
    """Affine maps of the stacked control array to the approximated states.

    Returns ``(V, I, lp, lq)`` so that, with ``dx = x - x_base``,
    ``|v| = a_hat + V dx``, ``|i| = b_hat + I dx``, ``p_loss = c_hat + lp dx``.
    """
    sizes = sens.base_controls.sizes
    P, Q = injection_maps(sens.maps, sizes)
    V = sens.Mv_p @ P + sens.Mv_q @ Q + sens.M_r @ tap_selector(sizes)
    I = sens.Mi_p @ P + sens.Mi_q @ Q
    lp = sens.ml_p_p @ P + sens.ml_p_q @ Q
    lq = sens.ml_q_p @ P + sens.ml_q_q @ Q
    return V, I, lp, lq


def predict_state(sens: SensitivityModel, u: ControlVector) -> GridStateApprox:
    """Evaluate the linear model at setpoints ``u``."""
    _check_controls(sens, u)
    d_fl = u.p_fl - sens.base_controls.p_fl
    d_cb = u.q_cb - sens.base_controls.q_cb
    d_rg = u.t_rg - sens.base_controls.t_rg
    d_pp = u.p_pv - sens.base_controls.p_pv
    d_pq = u.q_pv - sens.base_controls.q_pv
    mp = sens.maps
    dp = mp.I_fl @ d_fl - mp.I_pv @ d_pp
    dq = mp.I_cb @ d_cb + mp.I_pv @ d_pq
    v = sens.a_hat + sens.Mv_p @ dp + sens.Mv_q @ dq + sens.M_r @ d_rg
    i = sens.b_hat + sens.Mi_p @ dp + sens.Mi_q @ dq
    pl = sens.c_hat + sens.ml_p_p @ dp + sens.ml_p_q @ dq
    ql = sens.d_hat + sens.ml_q_p @ dp + sens.ml_q_q @ dq
    return GridStateApprox(v, i, float(pl), float(ql))


# ---------------------------------------------------------------------------
# sweep validation

SWEEP_COLUMNS = ("multiplier", "max_v_err", "mean_v_err", "max_i_err", "mean_i_err",
                 "ploss_nl", "ploss_lin", "qloss_nl", "qloss_lin")


@dataclass(frozen=True)
class SweepRow:
    multiplier: float
    max_v_err: float
    mean_v_err: float
    max_i_err: float
    mean_i_err: float
    ploss_nl: float
    ploss_lin: float
    qloss_nl: float
    qloss_lin: float

    @property
    def ploss_rel_err(self) -> float:
        return abs(self.ploss_lin - self.ploss_nl) / max(abs(self.ploss_nl), 1e-12)

    @property
    def qloss_rel_err(self) -> float:
        return abs(self.qloss_lin - self.qloss_nl) / max(abs(self.qloss_nl), 1e-12)


@dataclass
class SweepReport:
    rows: list[SweepRow]
    v_lin: list = field(default_factory=list, repr=False)
    v_nl: list = field(default_factory=list, repr=False)
    failure: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            wr.writerow([repr(float(getattr(r, c))) for c in SWEEP_COLUMNS])
        if self.failure:
            buf.write(f"# {self.failure}\n")
        return buf.getvalue()


def sweep_target(net: NetworkModel) -> ControlVector:
    """Default sweep end point.

    Flexible loads fully shed, PV active output curtailed to zero, taps at
    their upper limit and cap banks at full kvar. PV reactive setpoints stay
    at nominal.
    """
    dev = net.devices
    return ControlVector(
        p_fl=[d.p_max for d in dev.flexible_loads],
        q_cb=[d.q_max for d in dev.cap_banks],
        t_rg=[d.tap_max for d in dev.regulators],
        p_pv=[d.p_rating for d in dev.pv_units],
        q_pv=[d.q_nominal for d in dev.pv_units],
    )


def validate_sweep(net: NetworkModel, adm: AdmittanceModel, maps: IncidenceMaps, sens: SensitivityModel,
                   grid, target: ControlVector | None = None,
                   pf_cfg: PFConfig = PFConfig(tol=1e-10, max_iter=500)) -> SweepReport:
    """Compare the linear model with the nonlinear oracle along a control ramp.

    For multiplier ``k`` every control moves ``k`` of the way from the
    linearization setpoints to ``target``.
    """
    grid = [float(g) for g in grid]
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("multipliers must lie in [0, 1]")
    target = sweep_target(net) if target is None else target
    x_b = sens.base_controls.to_array()
    x_t = target.to_array()
    x_t[-2:] = x_b[-2:]
    rows, vl, vn = [], [], []
    for k in sorted(grid):
        u = ControlVector.from_array(x_b + k * (x_t - x_b), sens.base_controls.sizes)
        try:
            st = solve_controls(net, adm, maps, u, pf_cfg)
        except NoConvergence as exc:
            msg = f"power flow failed at multiplier {k:g}"
            raise NoConvergence(msg, exc.iterations, exc.residual, multiplier=k,
                                partial=SweepReport(rows, vl, vn, failure=f"{msg}: {exc}")) from exc
        lin = predict_state(sens, u)
        v_nl = np.abs(st.v_L)
        i_nl = np.abs(line_currents(adm, st))
        s_l = total_losses(adm, st)
        ev = np.abs(lin.v_mag - v_nl)
        ei = np.abs(lin.i_mag - i_nl)
        rows.append(SweepRow(k, float(ev.max(initial=0.0)), float(ev.mean()) if ev.size else 0.0,
                             float(ei.max(initial=0.0)), float(ei.mean()) if ei.size else 0.0,
                             s_l.real, lin.p_loss, s_l.imag, lin.q_loss))
        vl.append(lin.v_mag)
        vn.append(v_nl)
    return SweepReport(rows, vl, vn)


# ---------------------------------------------------------------------------
# estimator-style facade


class LinearPowerFlow(BaseEstimator):
    """Fit the linear power-flow model to a feeder; predict grid states.

    Parameters
    ----------
    point : {"base", "no_load"}
        Linearization point.
    method : {"exact", "fixed_point"}
        Complex voltage sensitivity variant.
    pf_tol : float
        Residual tolerance of the base power flow.
    """

    def __init__(self, point="base", method="exact", pf_tol=1e-10):
        self.point = point
        self.method = method
        self.pf_tol = pf_tol

    def fit(self, net: NetworkModel, u: ControlVector | None = None):
        sens, adm, maps = linearize_network(net, u, point=self.point, method=self.method,
                                            pf_cfg=PFConfig(tol=self.pf_tol, max_iter=1000))
        self.network_ = net
        self.sensitivities_ = sens
        self.admittance_ = adm
        self.incidence_ = maps
        return self

    def predict(self, u: ControlVector) -> GridStateApprox:
        check_is_fitted(self, "sensitivities_")
        return predict_state(self.sensitivities_, u)

    def transform(self, controls) -> np.ndarray:
        """Stack predicted voltage magnitudes for a sequence of setpoints."""
        check_is_fitted(self, "sensitivities_")
        return np.vstack([predict_state(self.sensitivities_, u).v_mag for u in controls])

    def sweep(self, grid, target=None) -> SweepReport:
        check_is_fitted(self, "sensitivities_")
        return validate_sweep(self.network_, self.admittance_, self.incidence_, self.sensitivities_, grid, target)


__all__ = [
    "GridStateApprox", "LinearPowerFlow", "SensitivityModel", "SweepReport", "SweepRow", "SWEEP_COLUMNS",
    "build_sensitivities", "complex_voltage_sensitivity", "injection_maps", "linearize_network",
    "predict_state", "state_matrices", "sweep_target", "tap_selector", "validate_sweep", "nominal_taps",
]
