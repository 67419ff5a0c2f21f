"""Projected dual-gradient DOPF.

Every iteration each device minimizes the Lagrangian over its own box given
the current prices (closed form, since the costs are separable quadratics),
the linear grid model predicts the resulting state, and the prices move
along the constraint residuals: ``lam <- lam - alpha * (p0 - demand)`` and
``mu <- [mu - beta * slack]_+``.
"""

from __future__ import annotations

import logging
import time

import numpy as np

from ..controls import ControlVector
from ..exceptions import Diverged, MaxIterations, ShapeMismatch
from ..linearization import GridStateApprox, SensitivityModel, predict_state
from .kkt import kkt_residuals
from .problem import CostModel, LimitSet, QPProblem, assemble_qp
from .solution import DualState, OPFSolution, SolverConfig, TraceRow

logger = logging.getLogger(__name__)


def _balance_gradients(sens: SensitivityModel):
    """Per-block derivatives of the active / reactive demand seen at the root."""
    mp = sens.maps
    one = np.ones(sens.n)
    # demand = -sum(injections) + losses; injections enter through the maps
    dp_dinj_p = -one + sens.ml_p_p
    dq_dinj_p = sens.ml_q_p
    dp_dinj_q = sens.ml_p_q
    dq_dinj_q = -one + sens.ml_q_q
    return {
        "p_fl": (dp_dinj_p @ mp.I_fl, dq_dinj_p @ mp.I_fl),
        "q_cb": (dp_dinj_q @ mp.I_cb, dq_dinj_q @ mp.I_cb),
        "p_pv": (-(dp_dinj_p @ mp.I_pv), -(dq_dinj_p @ mp.I_pv)),
        "q_pv": (dp_dinj_q @ mp.I_pv, dq_dinj_q @ mp.I_pv),
    }


def primal_update(sens: SensitivityModel, cost: CostModel, limits: LimitSet, duals: DualState) -> ControlVector:
    """Box-projected minimizer of the Lagrangian, one device block at a time.

    For the flexible loads, for instance::

        p_fl = [p_fl_r + (-c_a_fl - lam_p dDp/dp_fl - lam_q dDq/dp_fl
                  - I_fl' Mv_p' (mu_v_hi - mu_v_lo) - I_fl' Mi_p' (mu_i_hi - mu_i_lo)) / C_b_fl]

    and for the regulators ``t = [t_r - tau C_r' diag|w| (mu_v_hi - mu_v_lo) / C_b_rg]``.
    """
    mp = sens.maps
    ref = cost.reference
    dv = duals.mu_v_hi - duals.mu_v_lo
    di = duals.mu_i_hi - duals.mu_i_lo
    lam_p, lam_q = duals.lambda_p, duals.lambda_q
    bal = _balance_gradients(sens)
    # sensitivity of the limit terms to an active / reactive injection per node
    push_p = sens.Mv_p.T @ dv + sens.Mi_p.T @ di
    push_q = sens.Mv_q.T @ dv + sens.Mi_q.T @ di

    def block(name):
        gp, gq = bal[name]
        return lam_p * gp + lam_q * gq

    p_fl = ref.p_fl + (-cost.c_a_fl - block("p_fl") - mp.I_fl.T @ push_p) / cost.C_b_fl
    q_cb = ref.q_cb + (-block("q_cb") - mp.I_cb.T @ push_q) / cost.C_b_cb
    t_rg = ref.t_rg - (sens.M_r.T @ dv) / cost.C_b_rg
    # curtailment lowers the injection, hence the sign flip on the limit push
    p_pv = (-cost.c_a_pv - block("p_pv") + mp.I_pv.T @ push_p) / cost.C_b_pv
    q_pv = ref.q_pv + (-block("q_pv") - mp.I_pv.T @ push_q) / cost.C_b_qpv
    p0 = (lam_p - cost.c_a_p0) / cost.c_b_p0
    q0 = (lam_q - cost.c_a_q0) / cost.c_b_q0

    lo, hi = limits.box_lo, limits.box_hi
    return ControlVector(
        np.clip(p_fl, lo.p_fl, hi.p_fl), np.clip(q_cb, lo.q_cb, hi.q_cb), np.clip(t_rg, lo.t_rg, hi.t_rg),
        np.clip(p_pv, lo.p_pv, hi.p_pv), np.clip(q_pv, lo.q_pv, hi.q_pv),
        float(np.clip(p0, lo.p0, hi.p0)), float(np.clip(q0, lo.q0, hi.q0)),
    )


def balance_residual(sens: SensitivityModel, u: ControlVector, state: GridStateApprox) -> tuple[float, float]:
    """``(p0 - demand_p, q0 - demand_q)`` under the linear model."""
    if u.sizes != sens.base_controls.sizes:
        raise ShapeMismatch("control sizes do not match the model")
    mp = sens.maps
    d = u.to_array() - sens.base_controls.to_array()
    nfl, ncb, nrg, npv = u.sizes
    d_fl = d[:nfl]
    d_cb = d[nfl:nfl + ncb]
    d_pp = d[nfl + ncb + nrg:nfl + ncb + nrg + npv]
    d_pq = d[nfl + ncb + nrg + npv:nfl + ncb + nrg + 2 * npv]
    inj_p = sens.base.s_L.real.sum() + (mp.I_fl @ d_fl - mp.I_pv @ d_pp).sum()
    inj_q = sens.base.s_L.imag.sum() + (mp.I_cb @ d_cb + mp.I_pv @ d_pq).sum()
    return u.p0 - (-inj_p + state.p_loss), u.q0 - (-inj_q + state.q_loss)


def dual_update(sens: SensitivityModel, state_pred: GridStateApprox, limits: LimitSet, duals: DualState,
                cfg: SolverConfig = SolverConfig(), balance=(0.0, 0.0)) -> DualState:
    """One projected dual step.

    Parameters
    ----------
    balance : tuple of float
        ``(p0 - demand_p, q0 - demand_q)``, see :func:`balance_residual`.
    """
    lam_p = duals.lambda_p - cfg.alpha * balance[0]
    lam_q = duals.lambda_q - cfg.alpha * balance[1]
    v, i = state_pred.v_mag, state_pred.i_mag
    with np.errstate(invalid="ignore"):
        # infinite limits mean infinite slack, which projects any multiplier to zero
        mu_v_hi = np.maximum(duals.mu_v_hi - cfg.beta * (limits.v_hi - v), 0.0)
        mu_v_lo = np.maximum(duals.mu_v_lo - cfg.beta * (v - limits.v_lo), 0.0)
        mu_i_hi = np.maximum(duals.mu_i_hi - cfg.beta * (limits.i_hi - i), 0.0)
        mu_i_lo = np.maximum(duals.mu_i_lo - cfg.beta * (i - limits.i_lo), 0.0)
    return DualState(lam_p, lam_q, mu_v_lo, mu_v_hi, mu_i_lo, mu_i_hi)


def _kernel(qp: QPProblem):
    """Flat closures of the primal and dual maps over the stacked arrays."""
    H, c, A, b, G, h, lo, hi = qp.H, qp.c, qp.A, qp.b, qp.G, qp.h, qp.lo, qp.hi
    At, Gt = A.T.copy(), G.T.copy()

    def primal(lam, mu):
        return np.clip(-(c - At @ lam + Gt @ mu) / H, lo, hi)

    def residuals(x):
        return A @ x - b, G @ x - h

    return primal, residuals


def solve_distributed(sens: SensitivityModel, cost: CostModel, limits: LimitSet, base=None,
                      cfg: SolverConfig = SolverConfig(), x0=None, duals0: DualState | None = None,
                      qp: QPProblem | None = None, keep_trace: bool = True) -> OPFSolution:
    """Run the dual-gradient iteration to the stopping rule.

    The loop alternates: dual step from the predicted state at ``x``, primal
    minimization at the new prices, prediction at the new primal. It stops
    once the primal step and the pending dual step (scaled by ``1/alpha``,
    ``1/beta`` so that it measures the constraint residual) both stay below
    tolerance for ``cfg.patience`` consecutive iterations.

    Raises
    ------
    Diverged
        Non-finite iterates, or the dual norm grows more than
        ``cfg.growth_factor`` over ``cfg.window`` iterations while the dual
        step grows as well.
    MaxIterations
        Stopping rule not met within ``cfg.max_iter``; the trace is attached.
    """
    t0 = time.perf_counter()
    qp = assemble_qp(sens, cost, limits, base) if qp is None else qp
    primal, residuals = _kernel(qp)
    steps_eq = cfg.alpha
    steps_in = cfg.beta

    if duals0 is None:
        lam = np.zeros(qp.A.shape[0])
        mu = np.zeros(qp.G.shape[0])
    else:
        lam, mu = duals0.rows(qp)
    x = qp.meta["x_base"].copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, qp.lo, qp.hi)

    def pending(lam, mu, x):
        r_eq, r_in = residuals(x)
        return lam - steps_eq * r_eq, np.maximum(mu + steps_in * r_in, 0.0), r_eq, r_in

    lam_n, mu_n, r_eq, r_in = pending(lam, mu, x)
    trace = []
    calm = 0
    norms = []
    dsteps = []
    tol_p, tol_d = cfg.tol_primal, cfg.tol_dual
    for k in range(1, cfg.max_iter + 1):
        lam, mu = lam_n, mu_n
        x_new = primal(lam, mu)
        lam_n, mu_n, r_eq, r_in = pending(lam, mu, x_new)
        p_step = float(np.max(np.abs(x_new - x), initial=0.0))
        d_step = max(float(np.max(np.abs(lam_n - lam), initial=0.0)) / steps_eq,
                     float(np.max(np.abs(mu_n - mu), initial=0.0)) / steps_in)
        x = x_new
        if keep_trace:
            viol = max(float(np.max(np.abs(r_eq), initial=0.0)), float(np.max(r_in, initial=0.0)),
                       0.0)
            trace.append(TraceRow(k, qp.objective(x), p_step, d_step, viol))

        dnorm = float(np.max(np.abs(lam), initial=0.0))
        dnorm = max(dnorm, float(np.max(mu, initial=0.0)))
        if not (np.isfinite(dnorm) and np.all(np.isfinite(x)) and np.isfinite(d_step)):
            raise Diverged("non-finite iterate in the dual-gradient loop", k, trace)
        norms.append(dnorm)
        dsteps.append(d_step)
        w = cfg.window
        if k > w:
            old, old_step = norms[k - 1 - w], dsteps[k - 1 - w]
            if dnorm > cfg.growth_factor * max(old, 1e-8) and d_step > old_step:
                raise Diverged(f"dual norm grew from {old:.3e} to {dnorm:.3e} over {w} iterations; "
                               "reduce alpha/beta", k, trace)

        if p_step < tol_p and d_step < tol_d:
            calm += 1
            if calm >= cfg.patience:
                break
        else:
            calm = 0
    else:
        raise MaxIterations(f"dual-gradient loop did not settle within {cfg.max_iter} iterations",
                            cfg.max_iter, trace)

    if not keep_trace:
        r_eq, r_in = residuals(x)
        trace.append(TraceRow(k, qp.objective(x), p_step, d_step,
                              max(float(np.max(np.abs(r_eq), initial=0.0)), float(np.max(r_in, initial=0.0)), 0.0)))
    duals = DualState.from_rows(qp, lam, mu)
    obj = qp.objective(x)
    logger.info("distributed solve settled after %d iterations, objective %.10g", k, obj)
    return OPFSolution(qp.to_controls(x), duals, obj, k, trace, time.perf_counter() - t0, "distributed",
                       x=x, kkt=kkt_residuals(qp, x, lam, mu))


def predict_and_update(sens, cost, limits, duals, cfg=SolverConfig()):
    """One full block-form round: primal, prediction, dual. Returns ``(u, duals)``."""
    u = primal_update(sens, cost, limits, duals)
    st = predict_state(sens, u)
    return u, dual_update(sens, st, limits, duals, cfg, balance_residual(sens, u, st))
