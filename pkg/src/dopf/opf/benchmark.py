"""Randomized central-vs-distributed comparison."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..controls import ControlVector
from ..exceptions import DOPFError
from ..linearization import SensitivityModel
from .central import solve_central
from .distributed import solve_distributed
from .problem import CostModel, LimitSet, assemble_qp
from .solution import SolverConfig

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ("instance", "seed", "obj_central", "obj_dist", "gap_rel", "iters_dist", "ms_central", "ms_dist",
                 "status", "max_du", "kkt_central", "kkt_dist")

# each instance draws from numpy's default generator seeded with [seed, instance]
RNG_DOC = "numpy.random.default_rng([seed, instance]) (PCG64)"
PERTURBATION = 0.2


@dataclass
class BenchmarkRow:
    instance: int
    seed: int
    obj_central: float = float("nan")
    obj_dist: float = float("nan")
    gap_rel: float = float("nan")
    iters_dist: int = 0
    ms_central: float = 0.0
    ms_dist: float = 0.0
    status: str = "ok"
    max_du: float = float("nan")
    kkt_central: float = float("nan")
    kkt_dist: float = float("nan")
    trace: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _stat(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"min": None, "median": None, "max": None}
    return {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max())}


@dataclass
class BenchmarkReport:
    seed: int
    rows: list
    header: dict = field(default_factory=dict)

    @property
    def n_ok(self) -> int:
        return sum(r.ok for r in self.rows)

    @property
    def success_rate(self) -> float:
        return self.n_ok / len(self.rows) if self.rows else 1.0

    def summary(self) -> dict:
        ok = [r for r in self.rows if r.ok]
        ms_c = _stat(r.ms_central for r in ok)
        ms_d = _stat(r.ms_dist for r in ok)
        ratio = None
        if ms_c["median"] and ms_d["median"]:
            ratio = ms_d["median"] / ms_c["median"]
        return {
            "instances": len(self.rows), "converged": len(ok),
            "gap_rel": _stat(r.gap_rel for r in ok), "max_du": _stat(r.max_du for r in ok),
            "iters_dist": _stat(r.iters_dist for r in ok),
            "ms_central": ms_c, "ms_dist": ms_d, "time_ratio_dist_over_central": ratio,
        }

    def to_csv(self, timings: bool = True) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}: {v}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(BENCH_COLUMNS)
        for r in self.rows:
            vals = []
            for c in BENCH_COLUMNS:
                v = getattr(r, c)
                if c in ("ms_central", "ms_dist") and not timings:
                    v = 0.0
                vals.append(repr(float(v)) if isinstance(v, float) else v)
            wr.writerow(vals)
        return buf.getvalue()


def perturb_limits(limits: LimitSet, reference: ControlVector, rng: np.random.Generator,
                   spread: float = PERTURBATION) -> LimitSet:
    """Scale every limit's distance from its nominal by a factor in ``[1-spread, 1+spread]``.

    Voltage bands are measured from 1.0 p.u., ampacities from zero and device
    boxes from the rated reference. PV curtailment boxes stay at the available
    power, which is a physical bound.
    """
    n, m = limits.v_lo.size, limits.i_hi.size

    def f(k):
        return rng.uniform(1 - spread, 1 + spread, k)

    v_hi = 1.0 + (limits.v_hi - 1.0) * f(n)
    v_lo = 1.0 - (1.0 - limits.v_lo) * f(n)
    i_hi = np.where(np.isfinite(limits.i_hi), limits.i_hi * f(m), np.inf)
    lo, hi, r = limits.box_lo.to_array(), limits.box_hi.to_array(), reference.to_array()
    k = lo.size
    new_lo = np.where(np.isfinite(lo), r - (r - lo) * f(k), lo)
    new_hi = np.where(np.isfinite(hi), r + (hi - r) * f(k), hi)
    sizes = reference.sizes
    nfl, ncb, nrg, npv = sizes
    pv = slice(nfl + ncb + nrg, nfl + ncb + nrg + npv)
    new_lo[pv], new_hi[pv] = lo[pv], hi[pv]
    return replace(limits, v_lo=v_lo, v_hi=v_hi, i_hi=i_hi,
                   box_lo=ControlVector.from_array(new_lo, sizes), box_hi=ControlVector.from_array(new_hi, sizes))


def random_start(limits: LimitSet, x_base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Initial primal point, uniform inside the (finite) boxes; ``p0``/``q0`` near base."""
    lo, hi = limits.box_lo.to_array(), limits.box_hi.to_array()
    x = x_base.copy()
    fin = np.isfinite(lo) & np.isfinite(hi)
    x[fin] = rng.uniform(lo[fin], hi[fin])
    x[~fin] = x_base[~fin] + rng.uniform(-0.1, 0.1, (~fin).sum())
    return x


def run_instance(i: int, seed: int, sens: SensitivityModel, cost: CostModel, limits: LimitSet,
                 cfg: SolverConfig) -> BenchmarkRow:
    rng = np.random.default_rng([seed, i])
    row = BenchmarkRow(i, seed)
    lim = perturb_limits(limits, cost.reference, rng)
    x0 = random_start(lim, sens.base_controls.to_array(), rng)
    try:
        qp = assemble_qp(sens, cost, lim)
        t = time.perf_counter()
        c = solve_central(qp, cfg)
        row.ms_central = 1e3 * (time.perf_counter() - t)
        row.obj_central = c.objective
        row.kkt_central = c.kkt.max()
    except DOPFError as exc:
        row.status = f"central:{type(exc).__name__}"
        return row
    try:
        t = time.perf_counter()
        d = solve_distributed(sens, cost, lim, cfg=cfg, x0=x0, qp=qp)
        row.ms_dist = 1e3 * (time.perf_counter() - t)
    except DOPFError as exc:
        row.status = f"distributed:{type(exc).__name__}"
        row.iters_dist = getattr(exc, "iterations", 0)
        row.trace = getattr(exc, "trace", None) or []
        return row
    row.obj_dist = d.objective
    row.iters_dist = d.iterations
    row.kkt_dist = d.kkt.max()
    row.gap_rel = abs(d.objective - c.objective) / max(abs(c.objective), 1e-12)
    row.max_du = float(np.max(np.abs(d.x - c.x), initial=0.0))
    row.trace = d.trace
    return row


def _run_star(args):
    return run_instance(*args)


def benchmark(sens: SensitivityModel, cost: CostModel, limits: LimitSet, n_instances: int, seed: int,
              cfg: SolverConfig = SolverConfig(), workers: int = 1) -> BenchmarkReport:
    """Solve ``n_instances`` randomized problems both ways.

    Rows come back in instance order whatever the worker count, and every
    instance owns its generator, so the report depends only on ``seed``.
    """
    if n_instances < 0:
        raise ValueError("n_instances must be >= 0")
    jobs = [(i, seed, sens, cost, limits, cfg) for i in range(n_instances)]
    if workers > 1 and n_instances > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_star, jobs))
    else:
        rows = [_run_star(j) for j in jobs]
    for r in rows:
        if not r.ok:
            logger.info("instance %d failed: %s", r.instance, r.status)
    header = {
        "seed": seed, "instances": n_instances, "rng": RNG_DOC,
        "limits": f"distance from nominal scaled by U[{1 - PERTURBATION:g}, {1 + PERTURBATION:g}]",
        "initial_primal": "uniform within device boxes; p0/q0 base +- U[-0.1, 0.1]",
        "alpha": cfg.alpha, "beta": cfg.beta, "max_iter": cfg.max_iter,
    }
    return BenchmarkReport(seed, rows, header)
