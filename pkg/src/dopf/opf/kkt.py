"""Solver-independent KKT residuals for :class:`QPProblem` solutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import QPProblem


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.dual_feasibility, self.complementarity)

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max() <= tol

    def as_dict(self) -> dict:
        return {"stationarity": self.stationarity, "primal_feasibility": self.primal_feasibility,
                "dual_feasibility": self.dual_feasibility, "complementarity": self.complementarity}


def kkt_residuals(qp: QPProblem, x, lam, mu, active_tol: float = 1e-9) -> KKTReport:
    """Evaluate the optimality conditions at ``(x, lam, mu)``.

    Box multipliers are not carried by the solvers; they are implied from the
    gradient of the Lagrangian. A coordinate at its lower bound may have a
    nonnegative gradient, one at its upper bound a nonpositive one, and an
    interior coordinate needs a zero gradient.

    Parameters
    ----------
    qp : QPProblem
    x : array_like
        Primal point.
    lam : array_like
        Balance multipliers ``(lam_p, lam_q)``.
    mu : array_like
        One multiplier per row of ``qp.G``.
    active_tol : float
        Distance to a bound below which the bound counts as active.
    """
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    grad = qp.H * x + qp.c - qp.A.T @ lam + qp.G.T @ mu

    with np.errstate(invalid="ignore"):
        at_lo = np.isfinite(qp.lo) & (x <= qp.lo + active_tol * np.maximum(1.0, np.abs(qp.lo)))
        at_hi = np.isfinite(qp.hi) & (x >= qp.hi - active_tol * np.maximum(1.0, np.abs(qp.hi)))
    res = np.abs(grad)
    res = np.where(at_lo & ~at_hi, np.maximum(-grad, 0.0), res)
    res = np.where(at_hi & ~at_lo, np.maximum(grad, 0.0), res)
    res = np.where(at_lo & at_hi, 0.0, res)  # fixed coordinate

    # implied box multipliers times their slack
    nu = np.where(at_lo | at_hi, np.abs(grad), 0.0)
    box_slack = np.minimum(np.abs(x - qp.lo), np.abs(qp.hi - x))
    box_comp = np.max(nu * np.where(np.isfinite(box_slack), box_slack, 0.0), initial=0.0)

    slack = qp.h - qp.G @ x
    primal = qp.violation(x)
    dual = float(np.max(-mu, initial=0.0))
    comp = float(max(np.max(np.abs(mu * slack), initial=0.0), box_comp))
    return KKTReport(float(np.max(res, initial=0.0)), primal, dual, comp)
