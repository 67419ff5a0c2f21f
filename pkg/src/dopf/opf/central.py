"""Central QP solver: Mehrotra primal-dual interior point with an active-set polish."""

from __future__ import annotations

import logging
import time

import numpy as np

from ..exceptions import Infeasible, MaxIterations
from .kkt import kkt_residuals
from .problem import QPProblem
from .solution import DualState, OPFSolution, SolverConfig, TraceRow

logger = logging.getLogger(__name__)


def _stacked_inequalities(qp: QPProblem):
    """``G`` rows followed by the finite box rows as ``Gt x <= ht``."""
    n = qp.n_var
    eye = np.eye(n)
    up = np.isfinite(qp.hi)
    dn = np.isfinite(qp.lo)
    Gt = np.vstack([qp.G, eye[up], -eye[dn]])
    ht = np.concatenate([qp.h, qp.hi[up], -qp.lo[dn]])
    return Gt, ht


def check_row_feasibility(qp: QPProblem, tol: float = 1e-12) -> None:
    """Raise :class:`Infeasible` for a limit row no point of the box can satisfy."""
    lo = np.where(np.isfinite(qp.lo), qp.lo, -np.inf)
    hi = np.where(np.isfinite(qp.hi), qp.hi, np.inf)
    if np.any(lo > hi):
        k = int(np.flatnonzero(lo > hi)[0])
        raise Infeasible(f"empty box for control {k}", row=("box", k))
    for j, (g, h) in enumerate(zip(qp.G, qp.h)):
        with np.errstate(invalid="ignore"):
            best = np.where(g > 0, g * lo, np.where(g < 0, g * hi, 0.0))
        lowest = float(np.sum(best))
        if lowest > h + tol * max(1.0, abs(h)):
            kind = ("v_hi", "v_lo", "i_hi", "i_lo")[qp.row_kind[j]]
            raise Infeasible(f"{kind} limit at index {qp.row_index[j]} cannot be met inside the device boxes "
                             f"(best {lowest:.6g} > {h:.6g})", row=(kind, int(qp.row_index[j])))


def _ipm(qp: QPProblem, Gt, ht, max_iter=200, tol=1e-12):
    n = qp.n_var
    H = np.diag(qp.H)
    A, b, c = qp.A, qp.b, qp.c
    p, r = A.shape[0], Gt.shape[0]
    x = np.clip(np.zeros(n), qp.lo, qp.hi)
    y = np.zeros(p)
    s = np.maximum(ht - Gt @ x, 1.0)
    z = np.ones(r)
    scale = 1.0 + max(np.max(np.abs(c), initial=0.0), np.max(np.abs(b), initial=0.0),
                      np.max(np.abs(ht), initial=0.0))

    for it in range(1, max_iter + 1):
        r_d = H @ x + c - A.T @ y + Gt.T @ z
        r_p = A @ x - b
        r_g = Gt @ x + s - ht
        gap = s @ z / r if r else 0.0
        err = max(np.max(np.abs(r_d), initial=0.0), np.max(np.abs(r_p), initial=0.0),
                  np.max(np.abs(r_g), initial=0.0), gap)
        if err <= tol * scale:
            return x, y, z, s, it, True

        d = z / s
        K = np.zeros((n + p, n + p))
        K[:n, :n] = H + Gt.T @ (d[:, None] * Gt)
        K[:n, n:] = -A.T
        K[n:, :n] = A

        def direction(r_c):
            rhs_x = -r_d - Gt.T @ ((-r_c + z * r_g) / s)
            sol = np.linalg.solve(K, np.concatenate([rhs_x, -r_p]))
            dx, dy = sol[:n], sol[n:]
            ds = -r_g - Gt @ dx
            dz = (-r_c - z * ds) / s
            return dx, dy, ds, dz

        def max_step(v, dv):
            neg = dv < 0
            return min(1.0, float(np.min(-v[neg] / dv[neg], initial=np.inf)))

        # predictor
        dx, dy, ds, dz = direction(s * z)
        a_aff = min(max_step(s, ds), max_step(z, dz))
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / r if r else 0.0
        sigma = (mu_aff / gap) ** 3 if gap > 0 else 0.0
        # corrector
        dx, dy, ds, dz = direction(s * z + ds * dz - sigma * gap)
        a = 0.99 * min(max_step(s, ds), max_step(z, dz))
        a = min(a, 1.0)
        x, y, s, z = x + a * dx, y + a * dy, s + a * ds, z + a * dz
        logger.debug("ipm iteration %d err %.3e step %.3f", it, err, a)
    return x, y, z, s, max_iter, False


def _polish(qp: QPProblem, Gt, ht, x, y, z, s):
    """Re-solve with the apparently active rows as equalities.

    Returns the polished triple or ``None`` when the guessed active set is not
    optimal (wrong-signed multiplier or violated inactive row).
    """
    n, p = qp.n_var, qp.A.shape[0]
    active = z > s
    Ga = Gt[active]
    k = Ga.shape[0]
    K = np.zeros((n + p + k, n + p + k))
    K[:n, :n] = np.diag(qp.H)
    K[:n, n:n + p] = -qp.A.T
    K[:n, n + p:] = Ga.T
    K[n:n + p, :n] = qp.A
    K[n + p:, :n] = Ga
    rhs = np.concatenate([-qp.c, qp.b, ht[active]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    xp, yp, za = sol[:n], sol[n:n + p], sol[n + p:]
    if np.any(za < -1e-10):
        return None
    zp = np.zeros_like(z)
    zp[active] = np.maximum(za, 0.0)
    if np.max(Gt @ xp - ht, initial=0.0) > 1e-10:
        return None
    if np.max(np.abs(qp.H * xp + qp.c - qp.A.T @ yp + Gt.T @ zp), initial=0.0) > 1e-9:
        return None
    return xp, yp, zp


def solve_central(qp: QPProblem, cfg: SolverConfig = SolverConfig(), max_iter: int = 200) -> OPFSolution:
    """Solve ``qp`` to KKT precision.

    Raises
    ------
    Infeasible
        A limit row cannot be satisfied anywhere in the device boxes, or the
        interior-point iterates fail to reach feasibility.
    MaxIterations
        The interior-point method stalls without a feasibility diagnosis.
    """
    t0 = time.perf_counter()
    check_row_feasibility(qp)
    Gt, ht = _stacked_inequalities(qp)
    x, y, z, s, iters, ok = _ipm(qp, Gt, ht, max_iter=max_iter)
    if not ok:
        viol = qp.violation(x)
        trace = [TraceRow(iters, qp.objective(x), 0.0, 0.0, viol)]
        if viol > 1e-6:
            raise Infeasible(f"interior point did not reach feasibility (violation {viol:.3e})")
        raise MaxIterations("interior point hit its iteration limit", iters, trace)
    polished = _polish(qp, Gt, ht, x, y, z, s)
    if polished is not None:
        x, y, z = polished
    else:
        logger.info("active-set polish rejected; keeping interior-point iterate")
    # box rows are implied; only the limit rows carry reported multipliers
    mu = z[:qp.G.shape[0]]
    x = np.clip(x, qp.lo, qp.hi)
    duals = DualState.from_rows(qp, y, mu)
    obj = qp.objective(x)
    report = kkt_residuals(qp, x, y, mu)
    trace = [TraceRow(iters, obj, 0.0, 0.0, qp.violation(x))]
    return OPFSolution(qp.to_controls(x), duals, obj, iters, trace, time.perf_counter() - t0,
                       "central", x=x, kkt=report)
