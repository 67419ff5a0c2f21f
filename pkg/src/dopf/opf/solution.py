"""Solver configuration, dual state and solution records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..controls import ControlVector
from .problem import QPProblem

TRACE_COLUMNS = ("iter", "objective", "primal_step", "dual_step", "max_violation")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.05
    beta: float = 0.05
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    max_iter: int = 20000
    kkt_tol: float = 1e-6
    # consecutive small-step iterations required to stop
    patience: int = 3
    # Diverged when the dual norm grows by this factor over `window` iterations
    growth_factor: float = 10.0
    window: int = 100

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("step sizes must be positive")
        if not (self.tol_primal > 0 and self.tol_dual > 0 and self.kkt_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        d = dict(d or {})
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class DualState:
    lambda_p: float
    lambda_q: float
    mu_v_lo: np.ndarray
    mu_v_hi: np.ndarray
    mu_i_lo: np.ndarray
    mu_i_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lambda_p", float(self.lambda_p))
        object.__setattr__(self, "lambda_q", float(self.lambda_q))
        for name in ("mu_v_lo", "mu_v_hi", "mu_i_lo", "mu_i_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel())

    @classmethod
    def zeros(cls, n: int, m: int) -> "DualState":
        return cls(0.0, 0.0, np.zeros(n), np.zeros(n), np.zeros(m), np.zeros(m))

    @classmethod
    def from_rows(cls, qp: QPProblem, lam, mu) -> "DualState":
        full = [np.zeros(qp.n_nodes), np.zeros(qp.n_nodes), np.zeros(qp.n_lines), np.zeros(qp.n_lines)]
        for k in range(4):
            sel = qp.row_kind == k
            full[k][qp.row_index[sel]] = mu[sel]
        lam = np.concatenate([np.asarray(lam, dtype=float).ravel(), np.zeros(2)])  # balance rows may be absent
        return cls(lam[0], lam[1], mu_v_hi=full[0], mu_v_lo=full[1], mu_i_hi=full[2], mu_i_lo=full[3])

    def rows(self, qp: QPProblem) -> tuple[np.ndarray, np.ndarray]:
        """``(lam, mu)`` laid out as the equality and inequality rows of ``qp``."""
        full = (self.mu_v_hi, self.mu_v_lo, self.mu_i_hi, self.mu_i_lo)
        mu = np.empty(qp.row_kind.size)
        for k in range(4):
            sel = qp.row_kind == k
            mu[sel] = full[k][qp.row_index[sel]]
        return np.array([self.lambda_p, self.lambda_q]), mu

    def min_mu(self) -> float:
        return float(min((np.min(v, initial=np.inf) for v in (self.mu_v_lo, self.mu_v_hi, self.mu_i_lo, self.mu_i_hi)),
                         default=np.inf))

    def to_dict(self) -> dict:
        return {"lambda_p": self.lambda_p, "lambda_q": self.lambda_q,
                "mu_v_lo": self.mu_v_lo.tolist(), "mu_v_hi": self.mu_v_hi.tolist(),
                "mu_i_lo": self.mu_i_lo.tolist(), "mu_i_hi": self.mu_i_hi.tolist()}


@dataclass(frozen=True)
class TraceRow:
    iter: int
    objective: float
    primal_step: float
    dual_step: float
    max_violation: float


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRACE_COLUMNS)
    for r in trace:
        wr.writerow([r.iter, repr(float(r.objective)), repr(float(r.primal_step)),
                     repr(float(r.dual_step)), repr(float(r.max_violation))])
    return buf.getvalue()


@dataclass(eq=False)
class OPFSolution:
    u_star: ControlVector
    duals: DualState
    objective: float
    iterations: int
    trace: list
    wall_time: float
    method: str
    x: np.ndarray = field(repr=False, default=None)
    kkt: object = None

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "objective": self.objective,
            "iterations": self.iterations,
            "u_star": self.u_star.to_dict(),
            "duals": self.duals.to_dict(),
        }
        if self.kkt is not None:
            d["kkt"] = self.kkt.as_dict()
        return d
