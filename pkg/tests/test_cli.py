import csv
import json
import os
import subprocess
import sys

import pytest

from dopf.cli import (
    EXIT_BENCH,
    EXIT_COSIM,
    EXIT_DIVERGED,
    EXIT_NOCONV,
    EXIT_OK,
    EXIT_PARSE,
    build_parser,
    main,
)

from conftest import data_path

SNAPSHOT = os.path.join(os.path.dirname(__file__), "snapshots", "help.txt")
SUBCOMMANDS = ("pf", "linearize", "solve", "benchmark", "cosim")


def rows(path):
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and not r[0].startswith("#")]


def load(path):
    with open(path) as fh:
        return json.load(fh)


def run(*argv):
    return main([str(a) for a in argv])


# --- pf ---------------------------------------------------------------------------


def test_pf_writes_state(workdir):
    assert run("pf", "feeder8.json", "--out", workdir) == EXIT_OK
    table = rows(workdir / "pf_state.csv")
    assert table[0] == ["node", "v_mag", "v_angle_deg", "p", "q"]
    assert len(table) - 1 == 8
    man = load(workdir / "manifest.json")
    assert man["command"] == "pf"
    for name in man["outputs"]:
        assert (workdir / name).exists()


def test_pf_missing_file(workdir, capsys):
    assert run("pf", "missing.json") == EXIT_PARSE
    assert "missing.json" in capsys.readouterr().err


def test_pf_iteration_starvation(workdir):
    assert run("pf", "feeder8.json", "--max-iter", 1) == EXIT_NOCONV


def test_pf_is_idempotent(workdir):
    run("pf", "feeder8.json", "--out", "a")
    run("pf", "feeder8.json", "--out", "b")
    assert (workdir / "a/pf_state.csv").read_bytes() == (workdir / "b/pf_state.csv").read_bytes()


# --- linearize ----------------------------------------------------------------------


def test_linearize_grid_rows(workdir):
    assert run("linearize", "feeder8.json", "--grid", "0,0.5,1") == EXIT_OK
    table = rows(workdir / "sweep.csv")
    assert len(table) - 1 == 3


def test_linearize_zero_row(workdir):
    assert run("linearize", "feeder8.json", "--grid", "0") == EXIT_OK
    header, row = rows(workdir / "sweep.csv")
    rec = dict(zip(header, map(float, row)))
    assert all(rec[k] < 1e-10 for k in ("max_v_err", "mean_v_err", "max_i_err", "mean_i_err"))
    assert rec["ploss_lin"] == pytest.approx(rec["ploss_nl"], rel=1e-12)


def test_linearize_default_grid(workdir):
    assert run("linearize", "feeder8.json") == EXIT_OK
    table = rows(workdir / "sweep.csv")
    assert len(table) - 1 == 21
    assert [float(r[0]) for r in table[1:]] == pytest.approx([k * 0.05 for k in range(21)])


def test_linearize_bad_grid(workdir):
    assert run("linearize", "feeder8.json", "--grid", "0,2") == EXIT_PARSE


# --- solve ------------------------------------------------------------------------------


def test_solve_both_gap(workdir):
    assert run("solve", "feeder8.json", "--problem", data_path("overvoltage8.json")) == EXIT_OK
    gap = load(workdir / "gap.json")
    assert gap["gap_rel"] <= 1e-3
    for m in ("central", "distributed"):
        sol = load(workdir / f"solution_{m}.json")
        assert {"u_star", "duals", "objective", "iterations"} <= set(sol)
        assert rows(workdir / f"trace_{m}.csv")[0] == ["iter", "objective", "primal_step", "dual_step",
                                                        "max_violation"]


def test_solve_large_step_diverges(workdir):
    code = run("solve", "feeder8.json", "--problem", data_path("overvoltage8.json"),
               "--method", "distributed", "--alpha", 10, "--beta", 10)
    assert code == EXIT_DIVERGED
    assert (workdir / "trace_distributed.csv").exists()


def test_solve_no_devices_closed_form(workdir):
    from dopf.grid_model import build_admittance, load_network
    from dopf.power_flow import root_injection, solve_fixed_point

    assert run("solve", "two_node.json", "--method", "central") == EXIT_OK
    sol = load(workdir / "solution_central.json")
    net = load_network(data_path("two_node.json"))
    adm = build_admittance(net)
    st = solve_fixed_point(adm, -__import__("numpy").array(net.base_load), net.base_voltage)
    assert sol["u_star"]["p0"] == pytest.approx(root_injection(adm, st).real, abs=1e-8)


def test_solve_round_flag(workdir):
    assert run("solve", "feeder8.json", "--problem", data_path("overvoltage8.json"), "--method", "central",
               "--round") == EXIT_OK
    rep = load(workdir / "solution_central.json")["rounded"]
    assert float(rep["u_rounded"]["t_rg"][0]).is_integer()
    assert rep["feasible"] == (not rep["violations"])


# --- benchmark ----------------------------------------------------------------------------


def test_benchmark_deterministic(workdir):
    args = ("benchmark", "feeder8.json", "--problem", data_path("overvoltage8.json"), "--instances", 8,
            "--seed", 7, "--omit-timings")
    assert run(*args, "--out", "a") == EXIT_OK
    assert run(*args, "--out", "b", "--workers", 2) == EXIT_OK
    assert (workdir / "a/benchmark.csv").read_bytes() == (workdir / "b/benchmark.csv").read_bytes()
    summary = load(workdir / "a/benchmark_summary.json")
    assert summary["gap_rel"]["max"] <= 1e-3


def test_benchmark_zero_instances(workdir):
    assert run("benchmark", "feeder8.json", "--instances", 0) == EXIT_OK
    assert len(rows(workdir / "benchmark.csv")) == 1


def test_benchmark_failure_rate_exit(workdir):
    code = run("benchmark", "feeder8.json", "--problem", data_path("overvoltage8.json"), "--instances", 3,
               "--max-iter", 2)
    assert code == EXIT_BENCH


# --- cosim ------------------------------------------------------------------------------------


def test_cosim_closed_loop(workdir):
    assert run("cosim", "closedloop8.json", "--out", "a") == EXIT_OK
    assert run("cosim", "closedloop8.json", "--out", "b") == EXIT_OK
    summ = load(workdir / "a/summary.json")
    assert summ["regulation"]["violations_after_control"] == 0
    assert (workdir / "a/recording.ndjson").read_bytes() == (workdir / "b/recording.ndjson").read_bytes()
    assert (workdir / "a/recording.csv").exists()


def test_cosim_unknown_topic(workdir, capsys):
    doc = {"duration": 5, "federates": [{"name": "rec", "role": "recorder", "subscriptions": ["ghost"]}]}
    (workdir / "bad.json").write_text(json.dumps(doc))
    assert run("cosim", "bad.json") == EXIT_COSIM
    assert "ghost" in capsys.readouterr().err


# --- help text -------------------------------------------------------------------------------


def _help_texts():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    out = {"dopf": parser.format_help()}
    for name in SUBCOMMANDS:
        out[name] = sub.choices[name].format_help()
    return parser, sub, out


def test_every_flag_is_documented(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser, sub, texts = _help_texts()
    for name in SUBCOMMANDS:
        p = sub.choices[name]
        for action in p._actions:
            assert action.help, f"{name}: {action.dest} has no help"
            for opt in action.option_strings:
                assert opt in texts[name], f"{name}: {opt} missing from help"


def test_help_snapshot(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    _, _, texts = _help_texts()
    blob = "".join(f"== {k}\n{v}\n" for k, v in texts.items())
    if not os.path.exists(SNAPSHOT):  # first run records the snapshot
        os.makedirs(os.path.dirname(SNAPSHOT), exist_ok=True)
        with open(SNAPSHOT, "w") as fh:
            fh.write(blob)
    with open(SNAPSHOT) as fh:
        assert blob == fh.read()


def test_console_entry_point(tmp_path):
    env = dict(os.environ, DOPF_LOG="off")
    res = subprocess.run([sys.executable, "-m", "dopf.cli", "pf", "two_node.json", "--out", str(tmp_path)],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert res.stderr == ""
