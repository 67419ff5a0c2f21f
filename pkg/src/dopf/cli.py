"""``dopf`` command line: power flow, linearization sweep, OPF solve, benchmark, co-simulation.

Exit codes: 0 success, 2 unreadable or invalid input, 3 power flow did not
converge, 4 infeasible problem, 5 distributed solver diverged or ran out of
iterations, 6 fewer than 90% of benchmark instances succeeded, 7 co-simulation
fault, deadlock or unbound topic.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .controls import ControlVector, nominal_controls
from .exceptions import (
    DeadlockDetected,
    Diverged,
    DOPFError,
    Infeasible,
    MaxIterations,
    NoConvergence,
    ParseError,
    ScenarioFault,
    TopicUnbound,
    ValidationError,
)
from .grid_model import build_admittance, build_incidence, load_network
from .power_flow import PFConfig, line_currents, root_injection, solve_controls

logger = logging.getLogger("dopf")

EXIT_OK, EXIT_PARSE, EXIT_NOCONV, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_BENCH, EXIT_COSIM = 0, 2, 3, 4, 5, 6, 7
BENCH_SUCCESS = 0.9
DEFAULT_GRID = ",".join(f"{k / 20:g}" for k in range(21))


def _configure_logging():
    level = os.environ.get("DOPF_LOG", "off").strip().lower()
    root = logging.getLogger("dopf")
    root.handlers.clear()
    root.propagate = False
    if level in ("", "off"):
        root.setLevel(logging.CRITICAL + 1)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if level == "debug" else logging.INFO)


def _digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve(path: str) -> str:
    """Existing path as given, else the bundled data file of that name."""
    if os.path.exists(path) or os.path.dirname(path):
        return path
    from .cosim.scenario import resolve_network_path

    return resolve_network_path(path, None)


class _Run:
    """Collects inputs/outputs and writes ``manifest.json`` at the end."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.out = args.out
        self.inputs: dict = {}
        self.outputs: list = []
        self.t0 = time.perf_counter()
        os.makedirs(self.out, exist_ok=True)

    def input(self, path):
        if path and os.path.exists(path):
            self.inputs[str(path)] = _digest_file(path)
        return path

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.outputs.append(name)
        return path

    def write_json(self, name: str, doc) -> str:
        return self.write(name, json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def finish(self, seed=None):
        config = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "out")}
        blob = json.dumps(config, sort_keys=True, default=str).encode()
        manifest = {
            "command": self.command, "config_hash": hashlib.sha256(blob).hexdigest(), "config": config,
            "seed": seed, "version": __version__, "inputs": self.inputs,
            "outputs": self.outputs + ["manifest.json"], "wall_time_s": time.perf_counter() - self.t0,
        }
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"not serializable: {type(x).__name__}")


def _load_model(args, run: _Run):
    path = run.input(_resolve(args.model))
    net = load_network(path)
    problem = None
    if getattr(args, "problem", None):
        from .opf.problem import load_problem

        problem = load_problem(run.input(_resolve(args.problem)))
        net = problem.apply(net)
    return net, problem


def _load_controls(path, net) -> ControlVector:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ParseError("file not found", path=path) from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    base = nominal_controls(net).to_dict()
    base.update(doc.get("u_star", doc))
    try:
        return ControlVector.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad controls: {exc}", path=path) from None


# ---------------------------------------------------------------------------
# commands


def cmd_pf(args) -> int:
    run = _Run(args, "pf")
    net, _ = _load_model(args, run)
    adm, maps = build_admittance(net), build_incidence(net)
    u = _load_controls(run.input(args.controls), net) if args.controls else nominal_controls(net)
    cfg = PFConfig(tol=args.tol, max_iter=args.max_iter)
    st = solve_controls(net, adm, maps, u, cfg)
    v = np.concatenate([[st.v0], st.v_L])
    s = np.concatenate([[root_injection(adm, st)], st.s_L])
    rows = ["node,v_mag,v_angle_deg,p,q"]
    for nid, vk, sk in zip(net.nodes, v, s):
        cells = (abs(vk), np.degrees(np.angle(vk)), sk.real, sk.imag)
        rows.append(",".join([nid] + [repr(float(c)) for c in cells]))
    run.write("pf_state.csv", "\n".join(rows) + "\n")
    i = np.abs(line_currents(adm, st))
    print(f"converged in {st.iterations} iterations, residual {st.residual_norm:.3e}")
    print(f"|v| range [{np.abs(st.v_L).min():.6f}, {np.abs(st.v_L).max():.6f}], max |i| {i.max(initial=0):.6f}")
    run.finish()
    return EXIT_OK


def cmd_linearize(args) -> int:
    from .linearization import linearize_network, validate_sweep

    run = _Run(args, "linearize")
    net, _ = _load_model(args, run)
    try:
        grid = [float(g) for g in args.grid.split(",") if g.strip()]
    except ValueError:
        raise ValidationError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    sens, adm, maps = linearize_network(net, point=args.point, method=args.method)
    try:
        report = validate_sweep(net, adm, maps, sens, grid)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    except NoConvergence as exc:
        if exc.partial is not None:
            run.write("sweep.csv", exc.partial.to_csv())
        run.finish()
        raise
    run.write("sweep.csv", report.to_csv())
    if report.rows:
        worst = max(report.rows, key=lambda r: r.max_v_err)
        print(f"max |v| error {worst.max_v_err:.6g} p.u. at multiplier {worst.multiplier:g}")
        print(f"max loss error {max(r.ploss_rel_err for r in report.rows):.4%} (active), "
              f"{max(r.qloss_rel_err for r in report.rows):.4%} (reactive)")
    run.finish()
    return EXIT_OK


def _solver_config(args, problem):
    from .opf.solution import SolverConfig

    d = dict(problem.solver) if problem else {}
    for key in ("alpha", "beta", "max_iter", "tol_primal", "tol_dual"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return SolverConfig.from_dict(d)


def _opf_setup(args, run):
    from .linearization import linearize_network
    from .opf.problem import LimitSet, default_costs

    net, problem = _load_model(args, run)
    sens, adm, maps = linearize_network(net)
    cost = default_costs(net, root_injection(adm, sens.base), problem.costs if problem else None)
    return net, problem, sens, adm, maps, cost, LimitSet.from_network(net)


def cmd_solve(args) -> int:
    from .opf.central import solve_central
    from .opf.distributed import solve_distributed
    from .opf.problem import assemble_qp
    from .opf.rounding import verify_rounded
    from .opf.solution import trace_to_csv

    run = _Run(args, "solve")
    net, problem, sens, adm, maps, cost, limits = _opf_setup(args, run)
    cfg = _solver_config(args, problem)
    qp = assemble_qp(sens, cost, limits)
    methods = ["central", "distributed"] if args.method == "both" else [args.method]
    sols = {}
    for m in methods:
        try:
            sol = solve_central(qp, cfg) if m == "central" else solve_distributed(sens, cost, limits, cfg=cfg, qp=qp)
        except (Diverged, MaxIterations) as exc:
            if exc.trace:
                run.write(f"trace_{m}.csv", trace_to_csv(exc.trace))
            run.finish()
            raise
        sols[m] = sol
        doc = sol.to_dict()
        if args.round:
            doc["rounded"] = verify_rounded(net, adm, maps, sol.u_star, limits.v_lo, limits.v_hi, limits.i_hi).to_dict()
        run.write_json(f"solution_{m}.json", doc)
        run.write(f"trace_{m}.csv", trace_to_csv(sol.trace))
        print(f"{m}: objective {sol.objective:.10g}, iterations {sol.iterations}, "
              f"KKT residual {sol.kkt.max():.2e}, {1e3 * sol.wall_time:.1f} ms")
    if len(sols) == 2:
        c, d = sols["central"], sols["distributed"]
        gap = {
            "objective_central": c.objective, "objective_distributed": d.objective,
            "gap_rel": abs(d.objective - c.objective) / max(abs(c.objective), 1e-12),
            "max_control_deviation": float(np.max(np.abs(d.x - c.x), initial=0.0)),
            "time_ratio_dist_over_central": d.wall_time / c.wall_time if c.wall_time > 0 else None,
        }
        run.write_json("gap.json", gap)
        print(f"relative gap {gap['gap_rel']:.3e}, max control deviation {gap['max_control_deviation']:.3e}")
    run.finish()
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .opf.benchmark import benchmark
    from .opf.solution import trace_to_csv

    if args.instances < 0:
        raise ValidationError("--instances must be >= 0")
    run = _Run(args, "benchmark")
    net, problem, sens, adm, maps, cost, limits = _opf_setup(args, run)
    cfg = _solver_config(args, problem)
    report = benchmark(sens, cost, limits, args.instances, args.seed, cfg, workers=args.workers)
    run.write("benchmark.csv", report.to_csv(timings=not args.omit_timings))
    summary = report.summary()
    run.write_json("benchmark_summary.json", summary)
    if args.traces:
        for r in report.rows:
            run.write(os.path.join("traces", f"instance_{r.instance:04d}.csv"), trace_to_csv(r.trace))
    med = summary["gap_rel"]["median"]
    ratio = summary["time_ratio_dist_over_central"]
    print(f"{report.n_ok}/{len(report.rows)} instances converged; median gap "
          f"{'n/a' if med is None else f'{med:.3e}'}; max gap "
          f"{'n/a' if summary['gap_rel']['max'] is None else format(summary['gap_rel']['max'], '.3e')}; "
          f"time ratio dist/central {'n/a' if ratio is None else f'{ratio:.2f}'}")
    run.finish(seed=args.seed)
    return EXIT_OK if report.success_rate >= BENCH_SUCCESS else EXIT_BENCH


def _regulation(scenario, rec):
    voltage_topic = setpoint_topic = None
    for f in scenario.federates:
        if f.role == "feeder":
            voltage_topic = f.port("voltages", "pub")
        elif f.role == "dopf":
            setpoint_topic = f.port("setpoints", "pub")
    if voltage_topic is None or scenario.network is None:
        return None
    net = load_network(scenario.network)
    event_time = float(scenario.events[0]["time"]) if scenario.events else None
    return rec.regulation_summary(net.v_min, net.v_max, voltage_topic, setpoint_topic, event_time)


def cmd_cosim(args) -> int:
    from dataclasses import replace

    from .cosim import broker_run, load_scenario

    run = _Run(args, "cosim")
    scenario = load_scenario(run.input(_resolve(args.scenario)))
    if scenario.network:
        run.input(scenario.network)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    try:
        rec = broker_run(scenario, threaded=args.threaded)
    except ScenarioFault as exc:
        if exc.recording is not None:
            run.write("recording.ndjson", exc.recording.to_ndjson())
            run.write("recording.csv", exc.recording.to_csv())
        run.finish(seed=scenario.seed)
        raise
    run.write("recording.ndjson", rec.to_ndjson())
    run.write("recording.csv", rec.to_csv())
    summary = {"scenario": scenario.name, "hash": rec.scenario_hash, "seed": rec.seed, "messages": len(rec.messages),
               **rec.meta, "regulation": _regulation(scenario, rec)}
    run.write_json("summary.json", summary)
    print(f"{scenario.name}: {len(rec.messages)} messages recorded over {summary['rounds']} rounds")
    reg = summary["regulation"]
    if reg is not None:
        after = reg["violations_after_control"]
        print(f"voltage violations: {reg['violations_total']} total, "
              f"{'n/a (no control action)' if after is None else after} after first post-event DOPF activation")
    run.finish(seed=scenario.seed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_out(p):
    p.add_argument("--out", default=".", metavar="DIR", help="output directory (default: current directory)")


def _add_solver_flags(p):
    p.add_argument("--problem", metavar="FILE",
                   help="problem JSON with operating_point, costs, limits and solver sections")
    p.add_argument("--alpha", type=float, help="balance multiplier step size (default 0.05)")
    p.add_argument("--beta", type=float, help="limit multiplier step size (default 0.05)")
    p.add_argument("--max-iter", type=int, dest="max_iter", help="distributed iteration cap (default 20000)")
    p.add_argument("--tol-primal", type=float, dest="tol_primal", help="primal step tolerance (default 1e-6)")
    p.add_argument("--tol-dual", type=float, dest="tol_dual", help="dual step tolerance (default 1e-6)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dopf", description="Distribution-grid optimal power flow toolkit.",
                                     epilog="Set DOPF_LOG=off|info|debug for diagnostics on standard error.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", help="solve the nonlinear power flow", description="Solve the power flow and write "
                       "pf_state.csv (node, v_mag, v_angle_deg, p, q).")
    p.add_argument("model", help="network JSON (bundled fixtures may be named without a directory)")
    p.add_argument("--tol", type=float, default=1e-8, help="residual tolerance (default 1e-8)")
    p.add_argument("--max-iter", type=int, default=100, dest="max_iter", help="iteration cap (default 100)")
    p.add_argument("--controls", metavar="FILE", help="setpoint JSON (ControlVector fields or a solution file)")
    p.add_argument("--problem", metavar="FILE", help="problem JSON whose operating_point is applied")
    _add_out(p)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("linearize", help="linear model accuracy sweep", description="Linearize at the base "
                       "point and compare with the nonlinear power flow along a control ramp; writes sweep.csv.")
    p.add_argument("model", help="network JSON")
    p.add_argument("--grid", default=DEFAULT_GRID,
                   help="comma-separated multipliers in [0, 1] (default 0,0.05,...,1: 21 points)")
    p.add_argument("--point", choices=("base", "no_load"), default="base", help="linearization point")
    p.add_argument("--method", choices=("exact", "fixed_point"), default="exact",
                   help="voltage sensitivity variant (default exact)")
    p.add_argument("--problem", metavar="FILE", help="problem JSON whose operating_point is applied")
    _add_out(p)
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("solve", help="solve the DOPF problem", description="Solve the linearized DOPF; writes "
                       "solution_<method>.json, trace_<method>.csv and, for both, gap.json.")
    p.add_argument("model", help="network JSON")
    p.add_argument("--method", choices=("central", "distributed", "both"), default="both",
                   help="solver (default both)")
    p.add_argument("--round", action="store_true",
                   help="also round taps and capacitor steps and re-check them with the power flow")
    _add_solver_flags(p)
    _add_out(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("benchmark", help="randomized central vs distributed study",
                       description="Solve randomized instances both ways; writes benchmark.csv and "
                       "benchmark_summary.json.")
    p.add_argument("model", help="network JSON")
    p.add_argument("--instances", type=int, default=100, help="number of instances (default 100)")
    p.add_argument("--seed", type=int, default=0, help="seed of all randomness (default 0)")
    p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--omit-timings", action="store_true", dest="omit_timings",
                   help="write zero in the timing columns so reruns are byte-identical")
    p.add_argument("--traces", action="store_true", help="write per-instance iteration traces under traces/")
    _add_solver_flags(p)
    _add_out(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("cosim", help="run a co-simulation scenario", description="Run the scenario; writes "
                       "recording.ndjson, recording.csv and summary.json.")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--threaded", action="store_true", help="run each federate on its own thread")
    _add_out(p)
    p.set_defaults(func=cmd_cosim)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TopicUnbound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COSIM
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except Infeasible as exc:
        print(f"error: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (Diverged, MaxIterations) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DeadlockDetected, ScenarioFault) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COSIM
    except DOPFError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
