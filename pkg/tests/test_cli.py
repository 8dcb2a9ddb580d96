import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from conduct_lab.cli import COMMANDS, EXIT_DOMAIN, EXIT_USAGE, main, validate
from conduct_lab.environment import Environment
from conduct_lab.limit import required_half_extent


def run(argv):
    return main(argv)


def read_csv(path):
    lines = open(path, newline="").read().splitlines()
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def header(path):
    return [ln for ln in open(path).read().splitlines() if ln.startswith("#")]


def test_env_gen_and_inspect(tmp_path):
    out = tmp_path / "e.json"
    assert run(["env", "gen", "--kind", "constant", "--value", "1", "--d", "2", "--L", "8", "--seed", "1",
                "--out", str(out)]) == 0
    env = Environment.load(out)
    assert env.box.L == 8 and np.all(env.omega == 1)
    npz = tmp_path / "e.npz"
    assert run(["env", "gen", "--kind", "iid", "--law", '{"name": "uniform", "low": 1, "high": 2}',
                "--L", "4", "--seed", "2", "--out", str(npz)]) == 0
    assert Environment.load(npz).spec.seed == 2
    rep = tmp_path / "i.json"
    assert run(["env", "inspect", "--env", str(npz), "--out", str(rep), "--no-timestamp"]) == 0
    doc = json.loads(rep.read_text())
    assert set(doc) == {"config", "result"}


def test_unknown_command_exit_64(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["env", "nope"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE
    assert run(["env"]) == EXIT_USAGE
    assert run(["env", "gen", "--bogus", "1"]) == EXIT_USAGE


def test_domain_errors_exit_2(tmp_path, capsys):
    code = run(["ineq", "poincare", "--variant", "mu_weighted", "--p", "2", "--q", "3", "--L", "5"])
    assert code == EXIT_DOMAIN
    assert "1/p + 1/q = 2/d" in capsys.readouterr().err
    env = tmp_path / "e.json"
    run(["env", "gen", "--L", "8", "--seed", "1", "--out", str(env)])
    code = run(["lclt", "run", "--env", str(env), "--n", "16", "--T1", "1", "--T2", "2", "--K", "1"])
    assert code == EXIT_DOMAIN
    assert "need L >= 109" in capsys.readouterr().err
    assert run(["env", "gen", "--kind", "iid", "--law", '{"name": "uniform", "low": 0, "high": 1}']) == EXIT_DOMAIN


def test_tolerance_error_exit_3(capsys):
    code = run(["kernel", "heat", "--kind", "constant", "--value", "1e6", "--walk", "VSRW", "--L", "2",
                "--t", "1", "--no-timestamp"])
    assert code == 3
    assert "semigroup" in capsys.readouterr().err


def test_lclt_run_rows(tmp_path):
    n, T2, K = 4, 2.0, 1.0
    L = required_half_extent(n, K, T2)
    out = tmp_path / "l.csv"
    summ = tmp_path / "s.json"
    assert run(["lclt", "run", "--kind", "constant", "--L", str(L), "--n", str(n), "--T1", "1", "--T2", "2",
                "--K", "1", "--seed", "1", "--out", str(out), "--summary", str(summ), "--no-timestamp"]) == 0
    rows = read_csv(out)
    assert len(rows) == 32 * 49
    assert {"t", "x1", "x2", "scaled_kernel", "limit", "error", "J", "J1", "J4"} <= set(rows[0])
    s = json.loads(summ.read_text())["result"]
    assert s[0]["sigma_source"] == "analytic"
    assert s[0]["split_residual"] < 1e-10


def test_validate(tmp_path, capsys):
    good = tmp_path / "g.json"
    good.write_text(json.dumps({"command": "kernel heat", "seed": 1, "L": 3, "t": 2.0}))
    ok, lines = validate(good)
    assert ok and lines[0] == "ok"
    assert any(ln.startswith("series_terms") for ln in lines)
    missing = tmp_path / "m.json"
    missing.write_text(json.dumps({"command": "kernel heat", "L": 3}))
    ok, lines = validate(missing)
    assert not ok and "seed" in lines[0]
    small = tmp_path / "s.json"
    small.write_text(json.dumps({"command": "lclt run", "seed": 0, "L": 8, "n": [16], "T1": 1, "T2": 2, "K": 1}))
    ok, lines = validate(small)
    assert not ok and "required L = 109" in lines[0]
    assert run(["validate", str(small)]) == EXIT_DOMAIN
    trap = tmp_path / "t.json"
    trap.write_text(json.dumps({"command": "kernel heat", "seed": 0, "kind": "trap", "alpha": 1.0, "k_max": 4,
                                "walk": "VSRW"}))
    ok, lines = validate(trap)
    assert ok
    rate = [ln for ln in lines if ln.startswith("uniformization_rate")][0]
    assert float(rate.split("\t")[1]) == 4 * 2.0 ** 4


def test_config_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "ineq volume", "seed": 3, "L": 6, "r_max": 2}))
    out = tmp_path / "v.csv"
    assert run(["ineq", "volume", "--config", str(cfg), "--r_max", "4", "--out", str(out), "--no-timestamp"]) == 0
    conf = json.loads(out.read_text())["config"]
    assert conf["r_max"] == 4 and conf["L"] == 6 and conf["seed"] == 3


def test_timestamp_header(tmp_path):
    a = tmp_path / "a.csv"
    assert run(["kernel", "heat", "--L", "2", "--out", str(a)]) == 0
    h = header(a)
    assert h[0].startswith("# config: ") and h[1].startswith("# generated: ")
    b = tmp_path / "b.csv"
    assert run(["kernel", "heat", "--L", "2", "--out", str(b), "--no-timestamp"]) == 0
    assert not any(ln.startswith("# generated") for ln in header(b))
    j = tmp_path / "j.json"
    assert run(["ineq", "volume", "--L", "4", "--out", str(j)]) == 0
    assert "generated" in json.loads(j.read_text())


SMOKE = [
    ["env", "moments", "--kind", "iid", "--law", '{"name": "uniform", "low": 1, "high": 2}', "--L", "4"],
    ["kernel", "heat", "--L", "3", "--t", "1.5"],
    ["kernel", "green", "--L", "3", "--boundary", "absorbing", "--method", "series"],
    ["ineq", "iso", "--L", "4", "--radius", "1"],
    ["ineq", "poincare", "--L", "5", "--variant", "radial_mu", "--p", "2", "--q", "2", "--n_trials", "3"],
    ["ineq", "sobolev", "--L", "6", "--radius", "5", "--inner", "2", "--n_trials", "3"],
    ["ineq", "appendix", "--samples", "200"],
    ["harnack", "ehi", "--L", "8", "--boundary", "absorbing", "--n", "4", "--n_trials", "3"],
    ["harnack", "phi", "--L", "6", "--n", "4", "--t0", "8", "--n_times", "8"],
    ["harnack", "neardiag", "--L", "6", "--t", "4"],
    ["harnack", "holder", "--L", "8", "--boundary", "absorbing", "--n", "6", "--radii", "4,2,1"],
    ["harnack", "holder", "--L", "8", "--T0", "20", "--radii", "4,2,1"],
    ["walk", "simulate", "--L", "4", "--T", "3"],
    ["walk", "cov", "--L", "20", "--T", "4", "--n_paths", "2000"],
    ["walk", "occupancy", "--L", "10", "--n", "2", "--x", "0.5,0", "--n_paths", "2000"],
    ["lclt", "green", "--d", "3", "--n", "2", "--boundary", "absorbing", "--L", "4"],
    ["lclt", "trap", "--control", "0"],
    ["lclt", "moments", "--id", "sandwich", "--kind", "vertex_combine", "--law",
     '{"name": "lognormal", "sigma": 1}', "--L", "2"],
    ["lclt", "moments", "--id", "momX", "--n_samples", "20000"],
]


@pytest.mark.parametrize("argv", SMOKE, ids=[" ".join(a[:2]) + f"-{i}" for i, a in enumerate(SMOKE)])
def test_every_command_runs(tmp_path, argv):
    out = tmp_path / "o.txt"
    assert run(argv + ["--seed", "1", "--out", str(out), "--no-timestamp"]) == 0
    text = out.read_text()
    assert text.startswith("# config: ") or json.loads(text)["config"]["command"] == " ".join(argv[:2])


def test_all_commands_covered():
    covered = {tuple(a[:2]) for a in SMOKE} | {("env", "gen"), ("env", "inspect"), ("ineq", "volume"),
                                               ("lclt", "run")}
    assert covered == set(COMMANDS)


def test_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"r{k}.csv"
        assert run(["walk", "cov", "--kind", "iid", "--law", '{"name": "uniform", "low": 1, "high": 2}',
                    "--L", "12", "--T", "3", "--n_paths", "3000", "--seed", "9", "--out", str(p),
                    "--no-timestamp", "--threads", str(k + 1)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "conduct_lab.cli", "ineq", "volume", "--L", "3", "--r_max", "1",
                        "--no-timestamp"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "\r\n" in r.stdout or r.stdout.count("\n") >= 3
