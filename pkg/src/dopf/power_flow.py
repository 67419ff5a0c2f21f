"""Nonlinear power flow by fixed-point (Z-bus) iteration.

Sign convention: ``s_L`` holds net *injections* (generation positive, load
negative) at the non-root nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .controls import ControlVector, check_box
from .exceptions import NoConvergence, SingularMatrix
from .grid_model import AdmittanceModel, IncidenceMaps, NetworkModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PFConfig:
    tol: float = 1e-8
    max_iter: int = 100
    initial_guess: Literal["no_load", "flat", "provided"] = "no_load"
    v_init: tuple | None = None
    # early exit when the residual grows this many iterations in a row
    growth_window: int = 5
    v_floor: float = 0.2

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.initial_guess == "provided" and self.v_init is None:
            raise ValueError("initial_guess='provided' needs v_init")


@dataclass(frozen=True, eq=False)
class PowerFlowState:
    """Converged operating point.

    ``w_shift`` is the change of the no-load voltage caused by regulator taps
    (zero when taps sit at their nominal position). Currents and losses are
    evaluated on ``v_ref = v_L - w_shift``, the voltages referred to the
    untapped network.
    """

    v_L: np.ndarray
    v0: complex
    s_L: np.ndarray
    iterations: int
    residual_norm: float
    w_shift: np.ndarray = None
    residual_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.w_shift is None:
            object.__setattr__(self, "w_shift", np.zeros_like(self.v_L))

    @property
    def v_ref(self) -> np.ndarray:
        return self.v_L - self.w_shift

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v_L)


def no_load_voltage(adm: AdmittanceModel, v0: complex) -> np.ndarray:
    """``w`` solving ``YLL w = -YL0 v0``."""
    if adm.n == 0:
        return np.zeros(0, dtype=complex)
    w = adm.solve(-adm.YL0 * v0)
    if not np.all(np.isfinite(w)):
        raise SingularMatrix("no-load voltage is not finite")
    return w


def pf_residual(adm: AdmittanceModel, v_L, v0, s_L, w_shift=None) -> np.ndarray:
    """Complex power mismatch ``s_L - diag(v_L) conj(YL0 v0 + YLL v_ref)``."""
    v_ref = v_L if w_shift is None else v_L - w_shift
    return s_L - v_L * np.conj(adm.YL0 * v0 + adm.YLL @ v_ref)


def tap_shift(w: np.ndarray, C_r: np.ndarray, taus, dt) -> np.ndarray:
    """No-load voltage change from tap moves ``dt`` (steps from nominal).

    Downstream of each regulator the no-load voltage is scaled by
    ``1 + tau * dt``; cascaded regulators multiply.
    """
    dt = np.asarray(dt, dtype=float)
    if dt.size == 0:
        return np.zeros_like(w)
    taus = np.broadcast_to(np.asarray(taus, dtype=float), dt.shape)
    ratio = np.prod(np.power(1.0 + taus * dt, C_r), axis=1)
    return w * (ratio - 1.0)


def solve_fixed_point(adm: AdmittanceModel, s_L, v0: complex, cfg: PFConfig = PFConfig(),
                      w_shift=None) -> PowerFlowState:
    """Iterate ``v <- w + YLL^-1 conj(s_L) / conj(v)`` to convergence."""
    s_L = np.asarray(s_L, dtype=complex)
    v0 = complex(v0)
    n = adm.n
    if s_L.shape != (n,):
        raise ValueError(f"s_L must have shape ({n},), got {s_L.shape}")
    if not np.all(np.isfinite(s_L)):
        raise ValueError("s_L must be finite")
    w = no_load_voltage(adm, v0)
    shift = np.zeros(n, dtype=complex) if w_shift is None else np.asarray(w_shift, dtype=complex)
    w_eff = w + shift
    if n == 0:
        return PowerFlowState(w, v0, s_L, 0, 0.0, shift)

    if cfg.initial_guess == "no_load":
        v = w_eff.copy()
    elif cfg.initial_guess == "flat":
        v = np.full(n, v0, dtype=complex)
    else:
        v = np.asarray(cfg.v_init, dtype=complex).copy()
    if np.any(v == 0):
        raise ValueError("initial guess has zero entries")

    rhs_s = np.conj(s_L)
    history = []
    growth = 0
    res = np.inf
    for k in range(1, cfg.max_iter + 1):
        v = w_eff + adm.solve(rhs_s / np.conj(v))
        prev = res
        res = float(np.max(np.abs(pf_residual(adm, v, v0, s_L, shift))))
        history.append(res)
        logger.debug("fixed-point iteration %d residual %.3e", k, res)
        if not np.isfinite(res):
            raise NoConvergence("power flow diverged (non-finite voltage)", k, res)
        if res <= cfg.tol:
            return PowerFlowState(v, v0, s_L, k, res, shift, tuple(history))
        growth = growth + 1 if res > prev else 0
        if growth >= cfg.growth_window:
            raise NoConvergence("power flow residual grew for "
                                f"{cfg.growth_window} consecutive iterations", k, res)
        if np.min(np.abs(v)) < cfg.v_floor:
            raise NoConvergence(f"voltage collapsed below {cfg.v_floor} p.u.", k, res)
    raise NoConvergence("power flow hit max_iter", cfg.max_iter, res)


def line_currents(adm: AdmittanceModel, state: PowerFlowState) -> np.ndarray:
    """Sending-end line currents ``Yline_0 v0 + Yline_L v_ref``, ordered as the lines."""
    return adm.Yline_0 * state.v0 + adm.Yline_L @ state.v_ref


def total_losses(adm: AdmittanceModel, state: PowerFlowState) -> complex:
    """Complex network losses ``v^T conj(Y v)`` over all nodes."""
    vf = np.concatenate([[state.v0], state.v_ref])
    return complex(np.sum(vf * np.conj(adm.Y @ vf)))


def root_injection(adm: AdmittanceModel, state: PowerFlowState) -> complex:
    """Complex power entering the feeder at the root."""
    return complex(state.v0 * np.conj(adm.Y00 * state.v0 + adm.Y0L @ state.v_ref))


def pv_available(net: NetworkModel) -> np.ndarray:
    return np.array([pv.p_rating for pv in net.devices.pv_units], dtype=float)


def apply_controls(net: NetworkModel, maps: IncidenceMaps, u: ControlVector) -> np.ndarray:
    """Net complex injections for setpoints ``u`` (taps excluded).

    ``s_L = -s_cl + I_fl p_fl + j I_cb q_cb + I_pv (p_avail - p_pv) + j I_pv q_pv``
    """
    check_box(net, u)
    p_inj = maps.I_fl @ u.p_fl + maps.I_pv @ (pv_available(net) - u.p_pv)
    q_inj = maps.I_cb @ u.q_cb + maps.I_pv @ u.q_pv
    return -net.s_cl + p_inj + 1j * q_inj


def regulator_taus(net: NetworkModel) -> np.ndarray:
    return np.array([r.tau for r in net.devices.regulators], dtype=float)


def nominal_taps(net: NetworkModel) -> np.ndarray:
    return np.array([r.tap for r in net.devices.regulators], dtype=float)


def solve_controls(net: NetworkModel, adm: AdmittanceModel, maps: IncidenceMaps, u: ControlVector,
                   cfg: PFConfig = PFConfig()) -> PowerFlowState:
    """Nonlinear operating point for setpoints ``u``, taps included."""
    s_L = apply_controls(net, maps, u)
    w = no_load_voltage(adm, net.base_voltage)
    shift = tap_shift(w, maps.C_r, regulator_taus(net), u.t_rg - nominal_taps(net))
    return solve_fixed_point(adm, s_L, net.base_voltage, cfg, w_shift=shift)
