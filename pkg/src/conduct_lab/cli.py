"""Command-line frontend.

Every command reads its parameters from built-in defaults, then an optional
JSON config (``--config``), then explicit flags.  Outputs start with the
merged config; a timestamp line follows unless ``--no-timestamp`` is given.

Exit status: 0 on success, 2 on a domain error, 3 when a tolerance or series
ceiling cannot be met, 64 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import environment as envmod
from . import harnack, inequalities, limit, operators, walker
from .errors import DomainError, ToleranceError
from .lattice import LatticeBox, ball, radial_cutoff
from .parallel import ENV_VAR
from .seeding import rng_for

EXIT_DOMAIN = 2
EXIT_TOLERANCE = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- parameter parsing ------------------------------------------------------------

def _coord(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip() != ""]


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip() != ""]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip() != ""]


def _json(text):
    if not isinstance(text, str):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not valid JSON: {text!r} ({exc})") from None


def _num_or_inf(text):
    if isinstance(text, (int, float)):
        return float(text)
    return float("inf") if str(text).lower() in ("inf", "infinity") else float(text)


ENV_ARGS = [
    ("env", str, None, "environment file (.json or .npz); overrides the generator flags"),
    ("kind", str, "constant", "generator kind"),
    ("value", float, 1.0, "constant conductance"),
    ("law", _json, None, "law as JSON, e.g. '{\"name\": \"uniform\", \"low\": 1, \"high\": 2}'"),
    ("combine", str, "min", "vertex combine mode"),
    ("alpha", float, 1.0, "trap exponent alpha"),
    ("beta", float, 1.0, "trap exponent beta"),
    ("k0", int, 1, "first trap level"),
    ("k_max", int, None, "last trap level"),
    ("scale", float, 1.0, "field scale for the Gaussian free field"),
    ("d", int, 2, "dimension"),
    ("L", int, 8, "box half-extent"),
    ("boundary", str, "periodic", "periodic or absorbing"),
]
SEED = [("seed", int, 0, "master seed")]
WALK = [("walk", str, "CSRW", "CSRW or VSRW")]
TOL = [("tol", float, operators.DEFAULT_TOL, "series truncation tolerance")]
BALL = [("center", _coord, None, "ball center as comma-separated coordinates (default: origin)"),
        ("radius", int, 3, "ball radius")]

COMMANDS = {
    ("env", "gen"): ENV_ARGS + SEED,
    ("env", "inspect"): ENV_ARGS + SEED + [("trap_k", int, None, "report k-traps for this level")],
    ("env", "moments"): ENV_ARGS + SEED + [("p", _num_or_inf, 2.0, "positive moment"), ("q", _num_or_inf, 2.0, "negative moment"),
                                           ("n_envs", int, 4, "environments"), ("eps", float, 0.05, "plateau tolerance")],
    ("kernel", "heat"): ENV_ARGS + SEED + WALK + TOL + [("t", float, 1.0, "time"), ("x0", _coord, None, "start")],
    ("kernel", "green"): ENV_ARGS + SEED + WALK + TOL + [("x0", _coord, None, "source"),
                                                         ("method", str, "solve", "solve or series")],
    ("ineq", "volume"): ENV_ARGS + SEED + [("r_max", int, 3, "largest radius")],
    ("ineq", "iso"): ENV_ARGS + SEED + BALL + [("mode", str, "exhaustive", "exhaustive or falsify"),
                                               ("samples", int, 20000, "annealing steps")],
    ("ineq", "poincare"): ENV_ARGS + SEED + BALL + [("variant", str, "unweighted", "Poincare variant"),
                                                    ("p", _num_or_inf, None, "weight exponent p"),
                                                    ("q", _num_or_inf, None, "weight exponent q"),
                                                    ("profile", str, "linear", "radial profile: linear, cone or flat"),
                                                    ("n_trials", int, 20, "random test functions")],
    ("ineq", "sobolev"): ENV_ARGS + SEED + BALL + [("q", _num_or_inf, float("inf"), "nu exponent"),
                                                   ("inner", float, 1.0, "cutoff plateau radius"),
                                                   ("n_trials", int, 20, "random test functions")],
    ("ineq", "appendix"): SEED + [("id", str, "all", "estimate id or 'all'"), ("samples", int, 10000, "samples")],
    ("harnack", "ehi"): ENV_ARGS + SEED + TOL + [("center", _coord, None, "center"), ("n", int, 4, "radius"),
                                                 ("data", str, "random", "boundary data: random or constant"),
                                                 ("n_trials", int, 10, "random boundary draws"),
                                                 ("p", float, None, "mu exponent"), ("q", float, None, "nu exponent")],
    ("harnack", "phi"): ENV_ARGS + SEED + WALK + TOL + [("center", _coord, None, "center"), ("n", int, 4, "radius"),
                                                        ("t0", float, 0.0, "start time"),
                                                        ("source", _coord, None, "kernel source (default: center)"),
                                                        ("n_times", int, 64, "times per quarter")],
    ("harnack", "neardiag"): ENV_ARGS + SEED + WALK + TOL + [("t", float, 4.0, "time"), ("x1", _coord, None, "vertex")],
    ("harnack", "holder"): ENV_ARGS + SEED + WALK + TOL + [("center", _coord, None, "center"),
                                                           ("radii", _ints, [4, 2, 1], "radii"),
                                                           ("T0", float, None, "caloric end time (default: elliptic)"),
                                                           ("n", int, 4, "Dirichlet radius for the elliptic mode")],
    ("walk", "simulate"): ENV_ARGS + SEED + WALK + [("x0", _coord, None, "start"), ("T", float, 10.0, "horizon")],
    ("walk", "cov"): ENV_ARGS + SEED + WALK + [("T", float, 100.0, "horizon"), ("n_paths", int, 10000, "paths"),
                                               ("n_envs", int, 1, "environments")],
    ("walk", "occupancy"): ENV_ARGS + SEED + WALK + TOL + [("n", int, 4, "scale"), ("t", float, 1.0, "time"),
                                                           ("x", _floats, None, "cube center"),
                                                           ("delta", float, 0.25, "cube half-side"),
                                                           ("n_paths", int, 10000, "paths")],
    ("lclt", "run"): ENV_ARGS + SEED + WALK + TOL + [("n", _ints, [16], "scales"), ("T1", float, 1.0, "first time"),
                                                     ("T2", float, 2.0, "last time"), ("K", float, 1.0, "space window"),
                                                     ("n_t", int, limit.DEFAULT_T_POINTS, "time points"),
                                                     ("delta", float, limit.DEFAULT_DELTA, "cube half-side"),
                                                     ("sigma2", _json, "auto", "covariance or 'auto'"),
                                                     ("a", float, None, "limit prefactor (default: spatial average)"),
                                                     ("summary", str, None, "write the JSON summary here")],
    ("lclt", "green"): ENV_ARGS + SEED + TOL + [("n", _ints, [4], "scales"), ("x", _floats, None, "target point"),
                                                ("sigma2", _json, "auto", "covariance or 'auto'")],
    ("lclt", "trap"): [("alpha", float, 0.75, "trap height exponent"), ("beta", float, 0.75, "trap well exponent"),
                       ("d", int, 2, "dimension"), ("k", int, 6, "trap level"), ("R", int, 3, "trap distance"),
                       ("control", int, 1, "fit the constant-environment control")] + TOL + SEED,
    ("lclt", "moments"): ENV_ARGS + SEED + WALK + TOL + [("id", str, "sandwich", "sandwich, moment, est_om, low_est_path, momZ or momX"),
                                                         ("t", float, 1.0, "time"), ("qprime", float, 1.0, "moment order"),
                                                         ("n", int, 3, "power for est_om"),
                                                         ("n_envs", int, 16, "environments"),
                                                         ("N", int, 2, "summands for momZ"),
                                                         ("exponent", float, 1.0, "law moment exponent"),
                                                         ("n_samples", int, 1000000, "probe samples"),
                                                         ("edge", int, None, "edge index")],
}
GROUPS = ("env", "kernel", "ineq", "harnack", "walk", "lclt")


def _defaults(cmd):
    return {name: default for name, _, default, _ in COMMANDS[cmd]}


def _types(cmd):
    return {name: typ for name, typ, _, _ in COMMANDS[cmd]}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conduct-lab", description="Random conductance model experiments.")
    sub = parser.add_subparsers(dest="group", parser_class=_Parser)
    for group in GROUPS:
        gp = sub.add_parser(group)
        gsub = gp.add_subparsers(dest="command", parser_class=_Parser)
        for (g, name), args in COMMANDS.items():
            if g != group:
                continue
            p = gsub.add_parser(name)
            p.add_argument("--config", help="JSON config; explicit flags override it")
            p.add_argument("--out", help="output path (default: stdout)")
            p.add_argument("--threads", type=int, help=f"worker threads (default: ${ENV_VAR} or the CPU count)")
            p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")
            for arg, typ, _, hlp in args:
                p.add_argument(f"--{arg}", dest=arg, type=typ, default=argparse.SUPPRESS, help=hlp)
    v = sub.add_parser("validate")
    v.add_argument("config", help="JSON config with a 'command' field")
    return parser


def merge_params(cmd, config: dict | None, flags: dict) -> dict:
    params = _defaults(cmd)
    types = _types(cmd)
    for k, v in (config or {}).items():
        if k == "command":
            continue
        if k not in params:
            raise DomainError(f"unknown config field {k!r} for '{' '.join(cmd)}'")
        params[k] = None if v is None else types[k](v) if types[k] in (_coord, _floats, _ints, _num_or_inf) else v
    params.update(flags)
    return params


# -- output -----------------------------------------------------------------------

def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, operators.WalkKind):
        return str(obj)
    return obj


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


class Output:
    def __init__(self, cmd, params, timestamp: bool, path=None):
        self.path = path
        self.cmd = " ".join(cmd)
        self.config = {"command": self.cmd, **_plain(params)}
        self.timestamp = timestamp

    def header(self) -> str:
        lines = ["# config: " + json.dumps(self.config, sort_keys=True)]
        if self.timestamp:
            lines.append("# generated: " + datetime.now(timezone.utc).isoformat(timespec="seconds"))
        return "\n".join(lines) + "\n"

    def csv(self, rows: list, meta: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(self.header())
        if meta:
            buf.write("# meta: " + json.dumps(_plain(meta), sort_keys=True) + "\n")
        if rows:
            w = csv.writer(buf, lineterminator="\r\n")
            cols = list(rows[0].keys())
            w.writerow(cols)
            for r in rows:
                w.writerow([_cell(r[c]) for c in cols])
        return buf.getvalue()

    def json(self, result) -> str:
        doc = {"config": self.config, "result": _plain(result)}
        if self.timestamp:
            doc["generated"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _emit(text, path):
    if text is None:
        return
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- helpers ----------------------------------------------------------------------

def make_spec(P) -> envmod.GeneratorSpec:
    return envmod.GeneratorSpec(kind=P["kind"], value=P["value"], law=P["law"], combine=P["combine"],
                                alpha=P["alpha"], beta=P["beta"], k0=P["k0"], k_max=P["k_max"],
                                scale=P["scale"], seed=P["seed"])


def make_box(P) -> LatticeBox:
    return LatticeBox(P["d"], P["L"], P["boundary"])


def load_env(P) -> envmod.Environment:
    if P.get("env"):
        try:
            return envmod.Environment.load(P["env"])
        except FileNotFoundError:
            raise DomainError(f"environment file not found: {P['env']}") from None
    return envmod.generate(make_spec(P), make_box(P))


def _vertex(box, c):
    return box.index(np.zeros(box.d, dtype=int)) if c is None else box.index(c)


def _coord_cols(box, v):
    return {f"x{i + 1}": int(c) for i, c in enumerate(box.coords[v])}


def auto_sigma2(env, kind, P) -> tuple:
    """Analytic covariance for constant environments, the corrector on periodic boxes, else Monte Carlo."""
    kind = operators.as_kind(kind)
    d = env.box.d
    if P["sigma2"] != "auto":
        return np.atleast_2d(np.asarray(P["sigma2"], dtype=float)), "user"
    if np.all(env.omega == env.omega[0]):
        c = float(env.omega[0])
        return (np.eye(d) / d if kind.tag == "CSRW" else 2 * c * np.eye(d)), "analytic"
    if env.box.periodic:
        return walker.homogenized_covariance(env, kind), "corrector"
    T = max(1.0, (env.box.L / 6) ** 2)
    est = walker.estimate_covariance(env, kind, T, 20000, seed=P["seed"])
    return est.sigma2, "monte_carlo"


# -- command handlers ---------------------------------------------------------------

def cmd_env_gen(P, out):
    env = load_env(P)
    if out.path and str(out.path).endswith(".npz"):
        env.with_omega(env.omega, config=out.config).save(out.path)
        return None
    doc = env.to_dict()
    doc["config"] = out.config
    if out.timestamp:
        doc["generated"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return json.dumps(doc, sort_keys=True) + "\n"


def cmd_env_inspect(P, out):
    env = load_env(P)
    om = env.omega
    res = {"box": env.box.to_dict(), "n_vertices": env.box.n_vertices, "n_edges": env.box.n_edges,
           "omega_min": om.min(), "omega_max": om.max(), "omega_mean": om.mean(), "mu_mean": env.mu.mean(),
           "nu_mean": env.nu.mean(), "provenance": env.provenance}
    if P["trap_k"] is not None:
        res["traps"] = envmod.find_traps(env, P["alpha"], P["beta"], P["trap_k"]).tolist()
    return out.json(res)


def cmd_env_moments(P, out):
    rep = envmod.moment_report(make_spec(P), make_box(P), P["p"], P["q"], P["n_envs"], P["eps"])
    return out.json(rep.to_dict())


def cmd_kernel_heat(P, out):
    env = load_env(P)
    kf = operators.heat_kernel(env, P["walk"], P["t"], _vertex(env.box, P["x0"]), P["tol"])
    rows = [{**_coord_cols(env.box, v), "P": kf.P[v], "q": kf.q[v]} for v in range(env.box.n_vertices)]
    return out.csv(rows, {"err": kf.err, "terms": kf.terms, "rate": kf.rate})


def cmd_kernel_green(P, out):
    env = load_env(P)
    gf = operators.green_kernel(env, P["walk"], _vertex(env.box, P["x0"]), P["tol"], P["method"])
    rows = [{**_coord_cols(env.box, v), "g": gf.g[v], "G": gf.G[v]} for v in range(env.box.n_vertices)]
    return out.csv(rows, {"err": gf.err, "method": gf.method})


def cmd_ineq_volume(P, out):
    return out.json(inequalities.volume_regularity(make_box(P), P["r_max"]))


def cmd_ineq_iso(P, out):
    box = make_box(P)
    B = ball(box, _vertex(box, P["center"]), P["radius"])
    return out.json(inequalities.isoperimetry(box, B, P["mode"], P["samples"], P["seed"]))


def _test_functions(box, P, low=0.0, high=1.0):
    rng = rng_for(P["seed"], 1)
    return [rng.uniform(low, high, box.n_vertices) for _ in range(P["n_trials"])]


PROFILES = {"linear": lambda s: 1.0 - 0.5 * s, "cone": lambda s: 1.0 - s, "flat": lambda s: 1.0}


def cmd_ineq_poincare(P, out):
    env = load_env(P)
    B = ball(env.box, _vertex(env.box, P["center"]), P["radius"])
    if P["profile"] not in PROFILES:
        raise UsageError(f"unknown profile {P['profile']!r}; choose from {sorted(PROFILES)}")
    prof = PROFILES[P["profile"]] if P["variant"].startswith("radial") else None
    reps = [inequalities.local_poincare(env, B, u, P["variant"], P["p"], P["q"], prof)
            for u in _test_functions(env.box, P)]
    consts = [r.implied_constant for r in reps]
    res = {"variant": P["variant"], "max_implied_constant": max(consts), "implied_constants": consts}
    if P["variant"] == "unweighted":
        res["spectral_constant"] = inequalities.poincare_spectral_constant(env, B)
    return out.json(res)


def cmd_ineq_sobolev(P, out):
    env = load_env(P)
    x0 = _vertex(env.box, P["center"])
    B = ball(env.box, x0, P["radius"])
    cut = radial_cutoff(env.box, x0, P["inner"], P["radius"])
    reps = [inequalities.sobolev(env, B, cut, u, P["q"]) for u in _test_functions(env.box, P, 1.0, 2.0)]
    consts = [r.implied_constant for r in reps]
    return out.json({"rho": reps[0].details["rho"], "median_implied_constant": float(np.median(consts)),
                     "implied_constants": consts})


def cmd_ineq_appendix(P, out):
    ids = inequalities.APPENDIX_IDS if P["id"] == "all" else (P["id"],)
    for i in ids:
        if i not in inequalities.APPENDIX_IDS:
            raise DomainError(f"unknown estimate {i!r}; expected one of {inequalities.APPENDIX_IDS}")
    return out.json([inequalities.appendix_soak(i, P["samples"], P["seed"]) for i in ids])


def cmd_harnack_ehi(P, out):
    env = load_env(P)
    x0 = _vertex(env.box, P["center"])
    rng = rng_for(P["seed"], 2)
    reports = []
    trials = 1 if P["data"] == "constant" else P["n_trials"]
    for _ in range(trials):
        if P["data"] == "constant":
            g = 1.0
        elif P["data"] == "random":
            g = rng.uniform(0.0, 1.0, env.box.n_vertices) + 1e-3
        else:
            raise DomainError("boundary data must be 'random' or 'constant'")
        prob = harnack.solve_harmonic(env, x0, P["n"], g, P["tol"])
        reports.append(harnack.ehi_ratio(prob, P["p"], P["q"]).row())
    return out.csv(reports)


def cmd_harnack_phi(P, out):
    env = load_env(P)
    x0 = _vertex(env.box, P["center"])
    src = x0 if P["source"] is None else env.box.index(P["source"])
    rep = harnack.phi_ratio(env, x0, P["n"], P["t0"], src, P["walk"], P["n_times"], P["tol"])
    return out.csv([rep.row()])


def cmd_harnack_neardiag(P, out):
    env = load_env(P)
    return out.json(harnack.near_diagonal_check(env, P["t"], _vertex(env.box, P["x1"]), P["walk"], P["tol"]))


def cmd_harnack_holder(P, out):
    env = load_env(P)
    x0 = _vertex(env.box, P["center"])
    if P["T0"] is None:
        g = rng_for(P["seed"], 3).uniform(0.0, 1.0, env.box.n_vertices)
        prob = harnack.solve_harmonic(env, x0, P["n"], g, P["tol"])
        res = harnack.holder_decay(env.box, prob.u, x0, P["radii"])
    else:
        res = harnack.holder_decay_caloric(env, x0, x0, P["T0"], P["radii"], P["walk"], tol=P["tol"])
    return out.json(res)


def cmd_walk_simulate(P, out):
    env = load_env(P)
    path = walker.simulate(env, P["walk"], _vertex(env.box, P["x0"]), P["T"], P["seed"])
    rows = [{"t": float(t), **{f"y{i + 1}": int(c) for i, c in enumerate(path.displacement[k])},
             "vertex": int(path.positions[k])} for k, t in enumerate(path.times)]
    return out.csv(rows, {"n_jumps": path.n_jumps})


def cmd_walk_cov(P, out):
    if P.get("env"):
        src = load_env(P)
    else:
        src = make_spec(P)
    est = walker.estimate_covariance(src, P["walk"], P["T"], P["n_paths"], P["n_envs"],
                                     box=None if P.get("env") else make_box(P), seed=P["seed"])
    return out.json(est.to_dict())


def cmd_walk_occupancy(P, out):
    env = load_env(P)
    x = np.zeros(env.box.d) if P["x"] is None else P["x"]
    occ = walker.cube_occupancy(env, P["walk"], P["n"], P["t"], x, P["delta"], P["n_paths"], P["seed"], tol=P["tol"])
    return out.json({"mc": occ.mc, "stderr": occ.stderr, "exact": occ.exact, "n_paths": occ.n_paths,
                     "cube_size": int(occ.cube.size)})


def cmd_lclt_run(P, out):
    env = load_env(P)
    kind = operators.as_kind(P["walk"])
    times, xs = limit.lclt_grid(env.box.d, P["T1"], P["T2"], P["K"], P["n_t"])
    sigma2, source = auto_sigma2(env, kind, P)
    a_ex = limit.exact_a(env.spec, env.box.d) if env.spec is not None and kind.tag == "CSRW" else None
    rows, summaries = [], []
    for n in P["n"]:
        rep = limit.lclt_error(env, n, times, xs, sigma2, P["a"], kind, P["delta"], P["tol"], a_ex, source)
        rows.extend(rep.rows())
        summaries.append(rep.summary())
    if P["summary"]:
        _emit(out.json(summaries), P["summary"])
    return out.csv(rows, {"sup_error": {str(s["n"]): s["sup_error"] for s in summaries}})


def cmd_lclt_green(P, out):
    x = np.eye(P["d"])[0] if P["x"] is None else np.asarray(P["x"], dtype=float)
    res = []
    for n in P["n"]:
        if P.get("env"):
            env = load_env(P)
        else:
            box = LatticeBox(P["d"], limit.green_half_extent(n, x), "absorbing")
            env = envmod.generate(make_spec(P), box)
        sigma2, source = auto_sigma2(env, "CSRW", P)
        rep = limit.green_lclt(env, n, x, sigma2, tol=P["tol"])
        res.append({**rep.to_dict(), "sigma_source": source})
    return out.json(res)


def cmd_lclt_trap(P, out):
    rep = limit.trap_counterexample(P["alpha"], P["beta"], P["d"], P["k"], P["R"], tol=P["tol"],
                                    control=bool(P["control"]))
    return out.json(rep)


def cmd_lclt_moments(P, out):
    i = P["id"]
    if i == "sandwich":
        env = load_env(P)
        return out.json(limit.sandwich_check(env, P["t"], P["tol"]))
    if i == "moment":
        est = limit.heat_kernel_moment(make_spec(P), make_box(P), P["walk"], P["t"], P["qprime"], P["edge"],
                                       P["n_envs"], P["tol"])
        return out.json(est.to_dict())
    if i in ("est_om", "low_est_path"):
        env = load_env(P)
        return out.json(limit.estimate_inequality_6(i, env=env, n=P["n"], t=P["t"], tol=P["tol"]))
    if i in ("momZ", "momX"):
        law = P["law"] or {"name": "power", "exponent": 1.0}
        return out.json(limit.estimate_inequality_6(i, law=law, beta=P["beta"], N=P["N"], alpha=P["exponent"],
                                                    n_samples=P["n_samples"], seed=P["seed"]))
    raise DomainError(f"unknown moment check {i!r}")


HANDLERS = {
    ("env", "gen"): cmd_env_gen, ("env", "inspect"): cmd_env_inspect, ("env", "moments"): cmd_env_moments,
    ("kernel", "heat"): cmd_kernel_heat, ("kernel", "green"): cmd_kernel_green,
    ("ineq", "volume"): cmd_ineq_volume, ("ineq", "iso"): cmd_ineq_iso, ("ineq", "poincare"): cmd_ineq_poincare,
    ("ineq", "sobolev"): cmd_ineq_sobolev, ("ineq", "appendix"): cmd_ineq_appendix,
    ("harnack", "ehi"): cmd_harnack_ehi, ("harnack", "phi"): cmd_harnack_phi,
    ("harnack", "neardiag"): cmd_harnack_neardiag, ("harnack", "holder"): cmd_harnack_holder,
    ("walk", "simulate"): cmd_walk_simulate, ("walk", "cov"): cmd_walk_cov, ("walk", "occupancy"): cmd_walk_occupancy,
    ("lclt", "run"): cmd_lclt_run, ("lclt", "green"): cmd_lclt_green, ("lclt", "trap"): cmd_lclt_trap,
    ("lclt", "moments"): cmd_lclt_moments,
}


# -- validation -------------------------------------------------------------------

def _law_sup(law):
    if law is None:
        return None
    name = law["name"]
    if name in ("uniform", "two_point"):
        return float(law["high"])
    if name == "power":
        return 1.0 if law["exponent"] >= 0 else float("inf")
    return float("inf")


def derived_quantities(cmd, P) -> dict:
    """Quantities a run would use, computed without running it."""
    out = {}
    d = P.get("d")
    if "L" in P and "boundary" in P and not P.get("env"):
        box = make_box(P)
        out.update({"side": box.side, "n_vertices": box.n_vertices, "n_edges": box.n_edges})
        make_spec(P)
    walk = P.get("walk", "CSRW")
    if "kind" in P:
        sup = P["value"] if P["kind"] == "constant" else _law_sup(P["law"])
        if P["kind"] == "trap":
            sup = float("inf") if P["k_max"] is None else 2.0 ** (P["alpha"] * P["k_max"])
        if walk == "CSRW":
            out["uniformization_rate"] = 1.0
        elif sup is not None:
            out["uniformization_rate"] = 2 * d * sup
    lam = out.get("uniformization_rate")
    if cmd == ("lclt", "run"):
        rate = lam if lam is not None and np.isfinite(lam) else 1.0
        need = {str(n): limit.required_half_extent(n, P["K"], P["T2"], P["delta"], rate) for n in P["n"]}
        out["required_L"] = need
        if not P.get("env"):
            bad = [n for n, L in need.items() if P["L"] < L]
            if bad:
                out["box_too_small"] = {n: need[n] for n in bad}
        if lam is not None and np.isfinite(lam):
            ceil = {}
            for n in P["n"]:
                N, _ = operators.poisson_truncation(lam * n ** 2 * P["T2"], P["tol"], 10 ** 9)
                ceil[str(n)] = N
            out["series_terms"] = ceil
            out["series_ceiling"] = operators.DEFAULT_MAX_TERMS
    if cmd in (("kernel", "heat"),) and lam is not None and np.isfinite(lam):
        out["series_terms"] = operators.poisson_truncation(lam * P["t"], P["tol"], 10 ** 9)[0]
        out["series_ceiling"] = operators.DEFAULT_MAX_TERMS
    if cmd == ("lclt", "green"):
        x = np.eye(d)[0] if P["x"] is None else np.asarray(P["x"], dtype=float)
        out["green_L"] = {str(n): limit.green_half_extent(n, x) for n in P["n"]}
    if cmd == ("lclt", "trap"):
        out["t1"] = float(P["R"]) ** 2
        out["t2"] = out["t1"] ** ((P["alpha"] + P["beta"]) * P["d"] / 2)
    return out


def validate(path) -> tuple:
    """Schema check of a config file; returns ``(ok, lines)``."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        return False, [f"error: config file not found: {path}"]
    except json.JSONDecodeError as exc:
        return False, [f"error: config is not valid JSON: {exc}"]
    if not isinstance(cfg, dict):
        return False, ["error: config must be a JSON object"]
    if "command" not in cfg:
        return False, ["error: missing field 'command'"]
    cmd = tuple(str(cfg["command"]).split())
    if cmd not in COMMANDS:
        return False, [f"error: unknown command {cfg['command']!r}"]
    if "seed" not in cfg:
        return False, ["error: missing field 'seed'"]
    try:
        P = merge_params(cmd, cfg, {})
        derived = derived_quantities(cmd, P)
    except (DomainError, KeyError, TypeError, ValueError) as exc:
        return False, [f"error: {exc}"]
    lines = []
    ok = "box_too_small" not in derived
    if not ok:
        for n, L in derived["box_too_small"].items():
            lines.append(f"error: box too small for n={n}: required L = {L}, config has L = {P['L']}")
    else:
        lines.append("ok")
    for k in sorted(derived):
        lines.append(f"{k}\t{json.dumps(_plain(derived[k]), sort_keys=True)}")
    return ok, lines


# -- entry point ---------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.group is None:
            raise UsageError(parser.format_usage().strip())
        if args.group == "validate":
            ok, lines = validate(args.config)
            print("\n".join(lines))
            return 0 if ok else EXIT_DOMAIN
        if args.command is None:
            raise UsageError(f"conduct-lab {args.group}: a subcommand is required")
        cmd = (args.group, args.command)
        config = None
        if args.config:
            try:
                with open(args.config) as fh:
                    config = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from None
        reserved = {"group", "command", "config", "out", "threads", "no_timestamp"}
        flags = {k: v for k, v in vars(args).items() if k not in reserved}
        if args.threads is not None:
            os.environ[ENV_VAR] = str(args.threads)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    try:
        P = merge_params(cmd, config, flags)
        out = Output(cmd, P, not args.no_timestamp, args.out)
        _emit(HANDLERS[cmd](P, out), args.out)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ToleranceError as exc:
        print(f"tolerance error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except BrokenPipeError:
        # reader closed early (e.g. piped into head); not an error
        sys.stderr.close()
        return 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
