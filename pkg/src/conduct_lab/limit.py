"""Local limit experiments: rescaled heat and Green kernels against their
Gaussian limits, the cube decomposition of the error, the trap mechanism that
breaks the local limit, and negative moments of edge heat kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special
from scipy.stats import norm

from .environment import Environment, GeneratorSpec, adjacent_edges, find_traps, generate, sample_law, tail_index
from .errors import DomainError
from .inequalities import IneqReport
from .lattice import LatticeBox
from .operators import (CSRW, DEFAULT_TOL, as_kind, green_kernel, heat_kernel, heat_kernel_times,
                        speed_measure, transition_matrix, uniformization_rate)
from .parallel import ordered_map
from .seeding import derive_seed, rng_for
from .walker import cube_members

DEFAULT_T_POINTS = 32
DEFAULT_DELTA = 0.1
GL_ORDER = 24


# -- Gaussian kernel ----------------------------------------------------------

def _spd(sigma2, d=None):
    s = np.atleast_2d(np.asarray(sigma2, dtype=float))
    if s.shape[0] != s.shape[1] or (d is not None and s.shape[0] != d):
        raise DomainError("covariance must be a square d x d matrix")
    if not np.allclose(s, s.T, rtol=1e-12, atol=1e-14):
        raise DomainError("covariance must be symmetric")
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise DomainError("covariance must be positive definite") from None
    return s


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """``k_t(x) = (2 pi t)^{-d/2} det(S)^{-1/2} exp(-x.S^{-1}x / 2t)``."""

    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma2", _spd(self.sigma2))

    @property
    def d(self) -> int:
        return self.sigma2.shape[0]

    def __call__(self, t, x):
        return gaussian_kernel(self.sigma2, t, x)

    def cube_mass(self, t, x, delta):
        return cube_integral(self.sigma2, t, x, delta)


def gaussian_kernel(sigma2, t, x):
    """Evaluate the Gaussian kernel at ``x`` (shape ``(d,)`` or ``(k, d)``)."""
    s = _spd(sigma2)
    if np.any(np.asarray(t) <= 0):
        raise DomainError("gaussian kernel needs t > 0")
    d = s.shape[0]
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    quad = np.einsum("ki,ij,kj->k", x, np.linalg.inv(s), x)
    val = (2 * np.pi * t) ** (-d / 2) / np.sqrt(np.linalg.det(s)) * np.exp(-quad / (2 * t))
    return float(val[0]) if single else val


def cube_integral(sigma2, t, x, delta) -> float:
    """``int_{x + [-delta, delta]^d} k_t(y) dy``.

    Product of normal CDF differences for diagonal covariance, tensor
    Gauss-Legendre quadrature otherwise.
    """
    s = _spd(sigma2)
    x = np.asarray(x, dtype=float).reshape(s.shape[0])
    if np.allclose(s, np.diag(np.diag(s)), rtol=0, atol=0):
        sd = np.sqrt(np.diag(s) * t)
        return float(np.prod(norm.cdf((x + delta) / sd) - norm.cdf((x - delta) / sd)))
    d = s.shape[0]
    nodes, weights = np.polynomial.legendre.leggauss(GL_ORDER)
    grid = np.stack(np.meshgrid(*([nodes] * d), indexing="ij"), axis=-1).reshape(-1, d)
    w = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    pts = x + delta * grid
    return float(np.sum(w * gaussian_kernel(s, t, pts)) * delta ** d)


# -- quenched local limit -------------------------------------------------------

def lclt_grid(d: int, T1: float, T2: float, K: float, n_t: int = DEFAULT_T_POINTS,
              x_step: float | None = None) -> tuple:
    """``n_t`` equispaced times in ``[T1, T2]`` and lattice points of spacing ``K/4`` with ``|x| <= K``."""
    if not 0 < T1 <= T2:
        raise DomainError("time window needs 0 < T1 <= T2")
    if K < 0:
        raise DomainError("K must be non-negative")
    times = np.linspace(T1, T2, n_t) if n_t > 1 else np.array([float(T1)])
    if K == 0:
        return times, np.zeros((1, d))
    h = K / 4 if x_step is None else x_step
    m = int(np.floor(K / h + 1e-9))
    axis = h * np.arange(-m, m + 1)
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.sum(pts ** 2, axis=1) <= K ** 2 * (1 + 1e-12)
    return times, pts[keep]


def required_half_extent(n: int, K: float, T2: float, delta: float = DEFAULT_DELTA, max_rate: float = 1.0) -> int:
    """Box margin: ``L >= n (K + delta) + 4 sqrt(n^2 T2 max_rate)``."""
    return int(np.ceil(n * (K + delta) + 4 * np.sqrt(n ** 2 * T2 * max_rate)))


def lattice_point(n: int, x) -> np.ndarray:
    """Component-wise floor of ``n x``."""
    return np.floor(n * np.asarray(x, dtype=float) + 1e-12).astype(np.int64)


@dataclass
class LcltReport:
    n: int
    times: np.ndarray = field(repr=False)
    xs: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    limit: np.ndarray = field(repr=False)
    J: np.ndarray = field(repr=False)
    parts: np.ndarray = field(repr=False)
    sup_error: float = 0.0
    sup_error_coarse: float = 0.0
    a: float = 0.0
    a_exact: float | None = None
    sigma2: np.ndarray = field(default=None, repr=False)
    sigma_source: str = ""
    delta: float = DEFAULT_DELTA
    kernel_err: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.values - self.limit)

    @property
    def split_residual(self) -> float:
        return float(np.max(np.abs(self.parts.sum(axis=0) - self.J)))

    def rows(self) -> list:
        out = []
        for i, t in enumerate(self.times):
            for j, x in enumerate(self.xs):
                row = {"n": self.n, "t": float(t)}
                row.update({f"x{k + 1}": float(v) for k, v in enumerate(x)})
                row.update({"scaled_kernel": float(self.values[i, j]), "limit": float(self.limit[i, j]),
                            "error": float(abs(self.values[i, j] - self.limit[i, j])), "J": float(self.J[i, j])})
                row.update({f"J{k + 1}": float(self.parts[k, i, j]) for k in range(4)})
                out.append(row)
        return out

    def summary(self) -> dict:
        return {"n": self.n, "sup_error": self.sup_error, "sup_error_half_t_grid": self.sup_error_coarse,
                "a": self.a, "a_exact": self.a_exact, "sigma2": np.asarray(self.sigma2).tolist(),
                "sigma_source": self.sigma_source, "delta": self.delta, "n_t": int(self.times.size),
                "n_x": int(self.xs.shape[0]), "split_residual": self.split_residual,
                "kernel_err": self.kernel_err}


def lclt_error(env, n: int, times, xs, sigma2, a: float | None = None, kind=CSRW,
               delta: float = DEFAULT_DELTA, tol: float = DEFAULT_TOL, a_exact: float | None = None,
               sigma_source: str = "user") -> LcltReport:
    """Compare ``n^d q(n^2 t, 0, floor(n x))`` with ``a k_t(x)`` on a grid.

    ``a`` defaults to ``1 / mean(m)`` over the box (``m = mu`` for the CSRW),
    the spatial-average surrogate for ``1 / E[mu(0)]``.  Each grid cell also
    carries the cube error ``J = P_0[Y_t^(n) in C(x, delta)] - int_C k_t`` and
    its four parts.
    """
    box = env.box
    kind = as_kind(kind)
    d = box.d
    times = np.asarray(times, dtype=float)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != d:
        raise DomainError("grid points must have d components")
    sigma2 = _spd(sigma2, d)
    K_inf = float(np.max(np.abs(xs))) if xs.size else 0.0
    need = required_half_extent(n, K_inf, float(times.max()), delta, uniformization_rate(env, kind))
    if box.L < need:
        raise DomainError(f"box too small for n={n}: need L >= {need}, have L={box.L}")
    m = speed_measure(env, kind)
    if a is None:
        a = 1.0 / float(np.mean(m))
    origin = box.index(np.zeros(d, dtype=int))
    centers = box.index(lattice_point(n, xs))
    cubes = [cube_members(box, n, x, delta) for x in xs]
    probe = np.unique(np.concatenate([centers] + cubes))
    pos = {v: i for i, v in enumerate(probe.tolist())}
    P, errs = heat_kernel_times(env, kind, n ** 2 * times, origin, tol, probe=probe)
    q = P / m[probe][None, :]
    nd = float(n) ** d
    c_idx = np.array([pos[v] for v in centers.tolist()])
    values = nd * q[:, c_idx]
    kt = np.array([gaussian_kernel(sigma2, t, xs) for t in times])
    limit = a * kt
    vol = (2 * delta) ** d
    J = np.zeros_like(values)
    parts = np.zeros((4,) + values.shape)
    for j, cube in enumerate(cubes):
        ci = np.array([pos[v] for v in cube.tolist()], dtype=int)  # may be empty when n delta < 1/2
        mc = float(np.sum(m[cube]))
        for i, t in enumerate(times):
            qz = q[i, ci]
            q0 = q[i, c_idx[j]]
            k = kt[i, j]
            kc = cube_integral(sigma2, t, xs[j], delta)
            J[i, j] = float(np.sum(P[i, ci])) - kc
            parts[0, i, j] = float(np.sum((qz - q0) * m[cube]))
            parts[1, i, j] = mc * (q0 - a * k / nd)
            parts[2, i, j] = k * (mc * a / nd - vol)
            parts[3, i, j] = k * vol - kc
    err = np.abs(values - limit)
    return LcltReport(n, times, xs, values, limit, J, parts, float(err.max()), float(err[::2].max()),
                      float(a), a_exact, sigma2, sigma_source, float(delta), float(errs.max()))


def lclt_scan(env, ns, times, xs, sigma2, threads=None, **kw) -> list:
    """:func:`lclt_error` for several ``n`` on one environment."""
    return ordered_map(lambda n: lclt_error(env, int(n), times, xs, sigma2, **kw), list(ns), threads)


def a_spatial_drift(spec: GeneratorSpec, d: int, L: int) -> float:
    """Relative change of ``1 / mean(mu)`` between boxes of half-extent ``L`` and ``2L``."""
    a1 = 1.0 / float(np.mean(generate(spec, LatticeBox(d, L)).mu))
    a2 = 1.0 / float(np.mean(generate(spec, LatticeBox(d, 2 * L)).mu))
    return abs(a2 - a1) / a2


def exact_a(spec: GeneratorSpec, d: int) -> float | None:
    """``1 / E[mu(0)]`` where the law has a closed-form mean (constant, iid uniform)."""
    if spec.kind == "constant":
        return 1.0 / (2 * d * spec.value)
    if spec.kind == "iid" and spec.law and spec.law.get("name") == "uniform":
        return 1.0 / (2 * d * 0.5 * (spec.law["low"] + spec.law["high"]))
    return None


# -- Green kernel limit ---------------------------------------------------------

def gbm_closed_form(sigma2, x) -> float:
    """``Gamma(d/2 - 1) / (2 pi^{d/2}) det(S)^{-1/2} (x.S^{-1}x)^{1 - d/2}``."""
    s = _spd(sigma2)
    d = s.shape[0]
    if d < 3:
        raise DomainError("the Brownian Green kernel is finite only for d >= 3")
    x = np.asarray(x, dtype=float).reshape(d)
    r2 = float(x @ np.linalg.solve(s, x))
    if r2 == 0:
        raise DomainError("the Green kernel diverges at x = 0")
    return float(special.gamma(d / 2 - 1) / (2 * np.pi ** (d / 2)) / np.sqrt(np.linalg.det(s)) * r2 ** (1 - d / 2))


def gbm_quadrature(sigma2, x, rtol: float = 1e-12) -> float:
    """``int_0^inf k_t(x) dt`` by adaptive quadrature, split at the natural time scale."""
    s = _spd(sigma2)
    d = s.shape[0]
    if d < 3:
        raise DomainError("the Brownian Green kernel is finite only for d >= 3")
    x = np.asarray(x, dtype=float).reshape(d)
    r2 = float(x @ np.linalg.solve(s, x))
    if r2 == 0:
        raise DomainError("the Green kernel diverges at x = 0")
    c = 1.0 / np.sqrt(np.linalg.det(s))

    def f(t):
        return (2 * np.pi * t) ** (-d / 2) * c * np.exp(-r2 / (2 * t)) if t > 0 else 0.0

    lo, _ = integrate.quad(f, 0, r2, epsabs=0, epsrel=rtol, limit=200)
    hi, _ = integrate.quad(f, r2, np.inf, epsabs=0, epsrel=rtol, limit=200)
    return float(lo + hi)


def green_half_extent(n: int, x) -> int:
    """Absorbing box for the Green kernel limit: ``L = max(n^2 |x|_inf, n |x|_inf + 2)``."""
    r = float(np.max(np.abs(x)))
    return int(max(np.ceil(n * n * r), np.ceil(n * r) + 2))


@dataclass
class GreenLcltReport:
    n: int
    x: list
    L: int
    scaled: float
    limit: float
    error: float
    a: float
    gbm: float
    gbm_quadrature: float
    residual: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def green_lclt(env, n: int, x, sigma2, a: float | None = None, kind=CSRW, tol: float = DEFAULT_TOL) -> GreenLcltReport:
    """``|n^{d-2} g(0, floor(n x)) - a g_BM(x)|`` on an absorbing box."""
    box = env.box
    d = box.d
    if d < 3:
        raise DomainError("the Green kernel limit needs d >= 3")
    if box.periodic:
        raise DomainError("the Green kernel limit needs an absorbing box")
    x = np.asarray(x, dtype=float).reshape(d)
    if not np.any(x):
        raise DomainError("x = 0 is excluded: the Brownian Green kernel diverges there")
    z = lattice_point(n, x)
    if np.max(np.abs(z)) >= box.L:
        raise DomainError(f"floor(n x) lies outside the open box; need L > {int(np.max(np.abs(z)))}")
    kind = as_kind(kind)
    if a is None:
        a = 1.0 / float(np.mean(speed_measure(env, kind)[box.interior]))
    origin = box.index(np.zeros(d, dtype=int))
    gf = green_kernel(env, kind, origin, tol)
    scaled = float(n) ** (d - 2) * float(gf.g[box.index(z)])
    gb = gbm_quadrature(sigma2, x)
    closed = gbm_closed_form(sigma2, x)
    return GreenLcltReport(int(n), x.tolist(), box.L, scaled, a * gb, abs(scaled - a * gb), float(a),
                           closed, gb, float(gf.err))


# -- trap mechanism ---------------------------------------------------------------

def plant_trap(env, e: int, alpha: float, beta: float, k: int) -> Environment:
    """Set ``omega(e) = 2^(alpha k)`` and ``2^(-beta k)`` on every edge adjacent to ``e``."""
    om = np.array(env.omega, dtype=float)
    om[adjacent_edges(env.box, e)] = 2.0 ** (-beta * k)
    om[e] = 2.0 ** (alpha * k)
    return env.with_omega(om, planted_trap=int(e), trap_k=int(k))


def remove_trap(env, e: int) -> Environment:
    """Reset the trap edge and its adjacent edges to conductance 1."""
    om = np.array(env.omega, dtype=float)
    om[adjacent_edges(env.box, e)] = 1.0
    om[e] = 1.0
    return env.with_omega(om, removed_trap=int(e))


@dataclass
class TrapReport:
    alpha: float
    beta: float
    k: int
    trap_edge: int
    trap_vertex: list
    R: float
    t1: float
    t2: float
    return_probability: float
    return_probability_ablated: float
    ratio: float
    ratio_ablated: float
    control_exponent: float | None = None
    control_target: float | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def control_decay_exponent(d: int, t1: float, s_factors=None, L: int | None = None,
                           tol: float = DEFAULT_TOL) -> tuple:
    """Fit the exponent of ``q(t1 + s, 0, 0) / q(t1, 0, 0)`` against ``1 + s/t1`` for ``omega = 1``.

    Returns ``(slope, target)`` with target ``-d/2``.
    """
    s = t1 * (np.geomspace(1, 64, 13) if s_factors is None else np.asarray(s_factors, dtype=float))
    tmax = t1 + float(s.max())
    L = int(np.ceil(6 * np.sqrt(tmax))) if L is None else L
    box = LatticeBox(d, L)
    env = Environment(box, np.ones(box.n_edges))
    o = box.index(np.zeros(d, dtype=int))
    P, _ = heat_kernel_times(env, CSRW, np.concatenate([[t1], t1 + s]), o, tol, probe=np.array([o]))
    ratio = P[1:, 0] / P[0, 0]
    slope = np.polyfit(np.log1p(s / t1), np.log(ratio), 1)[0]
    return float(slope), -d / 2


def trap_counterexample(alpha: float, beta: float, d: int = 2, k: int = 6, R: int = 3, box=None, env=None,
                        kind=CSRW, tol: float = DEFAULT_TOL, control: bool = True) -> TrapReport:
    """Return probability at a k-trap versus the heat-kernel ratio at the origin.

    Without ``env`` a trap is planted on ``omega = 1`` at edge
    ``{R e_2, R e_2 + e_1}``; with ``env`` the first k-trap found is used and
    ``R`` is its distance from the origin.  ``t1 = R^2`` and
    ``t2 = t1^{(alpha + beta) d / 2}``.
    """
    if (alpha + beta) * d / 2 <= 1:
        raise DomainError("trap dominance needs (alpha + beta) d / 2 > 1")
    if alpha <= 0 or beta <= 0:
        raise DomainError("alpha and beta must be positive")
    kind = as_kind(kind)
    if env is None:
        if d < 2:
            raise DomainError("planting at R e_2 needs d >= 2")
        t2_guess = float(R) ** ((alpha + beta) * d)
        if box is None:
            box = LatticeBox(d, max(R + 4, int(np.ceil(6 * np.sqrt(R ** 2 + t2_guess)))))
        base = Environment(box, np.ones(box.n_edges))
        xb = np.zeros(d, dtype=int)
        xb[1] = R
        xe = xb.copy()
        xe[0] = 1
        e = box.edge_index(box.index(xb), box.index(xe))
        env = plant_trap(base, e, alpha, beta, k)
    box = env.box
    traps = find_traps(env, alpha, beta, k)
    if traps.size == 0:
        raise DomainError(f"no {k}-trap with alpha={alpha}, beta={beta} in the environment")
    e = int(traps[0])
    x_bar = int(box.tail[e])
    origin = box.index(np.zeros(box.d, dtype=int))
    R_eff = max(1.0, float(box.distance(origin, np.array([x_bar]))[0]))
    t1 = R_eff ** 2
    t2 = t1 ** ((alpha + beta) * box.d / 2)
    ablated = remove_trap(env, e)

    def measure(en):
        ret = float(heat_kernel(en, kind, t2, x_bar, tol).P[x_bar])
        P, _ = heat_kernel_times(en, kind, [t1, t1 + t2], origin, tol, probe=np.array([origin]))
        return ret, float(P[1, 0] / P[0, 0])

    ret, ratio = measure(env)
    ret_ab, ratio_ab = measure(ablated)
    rep = TrapReport(alpha, beta, k, e, box.coords[x_bar].tolist(), R_eff, t1, t2, ret, ret_ab, ratio, ratio_ab,
                     details={"hold_scale": 2.0 ** ((alpha + beta) * k), "L": box.L})
    if control:
        rep.control_exponent, rep.control_target = control_decay_exponent(box.d, t1, tol=tol)
    return rep


# -- negative moments of edge kernels ----------------------------------------------

def edge_kernel_values(env, kind, t: float, tol: float = DEFAULT_TOL) -> tuple:
    """``mu(x) P_t(x, y)`` (CSRW) or ``P_t(x, y)`` (VSRW) for every edge, with the certificate."""
    kind = as_kind(kind)
    box = env.box
    P, err = transition_matrix(env, kind, t, tol)
    x, y = box.tail, box.head
    if kind.tag == "CSRW":
        return np.asarray(env.mu)[x] * P[x, y], np.asarray(env.mu)[x] * err
    return P[x, y], np.full(x.size, err)


@dataclass
class MomentEstimate:
    mean: float
    stderr: float
    values: np.ndarray = field(repr=False)
    qprime: float = 1.0
    t: float = 1.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": int(self.values.size), "qprime": self.qprime,
                "t": self.t}


def heat_kernel_moment(spec: GeneratorSpec, box: LatticeBox, kind, t: float, qprime: float, edge=None,
                       n_envs: int = 32, tol: float = DEFAULT_TOL, threads=None) -> MomentEstimate:
    """Monte Carlo estimate of ``E[(mu q mu)(t, x, y)^{-q'}]`` over environments.

    ``edge`` is an edge index (default: the first edge at the origin along
    ``e_1``).  Environment ``j`` uses seed ``derive_seed(spec.seed, j)``.
    """
    if t <= 0 or qprime <= 0:
        raise DomainError("heat kernel moment needs t > 0 and q' > 0")
    if edge is None:
        o = box.index(np.zeros(box.d, dtype=int))
        edge = int(box.neighbor_edges[o, 0])

    def one(j):
        s = GeneratorSpec.from_dict({**spec.to_dict(), "seed": derive_seed(spec.seed, j)})
        vals, _ = edge_kernel_values(generate(s, box), kind, t, tol)
        return vals[edge]

    v = np.array(ordered_map(one, range(n_envs), threads))
    w = v ** (-qprime)
    se = float(w.std(ddof=1) / np.sqrt(w.size)) if w.size > 1 else float("nan")
    return MomentEstimate(float(w.mean()), se, v, float(qprime), float(t))


@dataclass
class SandwichCheck:
    n_edges: int
    lower_violations: int
    upper_violations: int
    min_lower_ratio: float
    max_upper_ratio: float


def sandwich_check(env, t: float, tol: float = DEFAULT_TOL) -> SandwichCheck:
    """Per-edge check of ``t e^{-t} omega <= mu q mu <= e^{(2d-1) t} omega`` for the CSRW.

    A violation must exceed the kernel certificate.
    """
    d = env.box.d
    vals, err = edge_kernel_values(env, CSRW, t, tol)
    om = np.asarray(env.omega)
    lo = t * np.exp(-t) * om
    hi = np.exp((2 * d - 1) * t) * om
    return SandwichCheck(int(om.size), int(np.sum(vals < lo - err)), int(np.sum(vals > hi + err)),
                         float(np.min(vals / lo)), float(np.max(vals / hi)))


def nine_path(box, x: int, i: int, j: int) -> list:
    """Vertices of the oriented 9-step path from ``x`` to ``x + e_i`` through ``-e_i, +2e_j, +3e_i, -2e_j, -e_i``."""
    steps = [(-1, i), (1, j), (1, j), (1, i), (1, i), (1, i), (-1, j), (-1, j), (-1, i)]
    c = box.coords[x].copy()
    path = [x]
    for s, a in steps:
        c[a] += s
        path.append(box.index(c))
    return path


def path_family(box, x: int, i: int) -> list:
    """2d edge-disjoint oriented paths from ``x`` to ``x + e_i``: the edge, 2(d-1) detours of length 3, one of length 9."""
    d = box.d
    if d < 2:
        raise DomainError("the path family needs d >= 2")
    c = box.coords[x]
    y = box.index(c + np.eye(d, dtype=int)[i])
    paths = [[x, y]]
    for j in range(d):
        if j == i:
            continue
        for s in (1, -1):
            ej = np.zeros(d, dtype=int)
            ej[j] = s
            a = box.index(c + ej)
            b = box.index(c + ej + np.eye(d, dtype=int)[i])
            paths.append([x, a, b, y])
    j = (i + 1) % d
    paths.append(nine_path(box, x, i, j))
    return paths


def path_lower_bound(env, t: float, x: int, i: int) -> float:
    """``e^{-t} sum_paths t^k / (k! (2d M)^{k-1}) prod omega`` over :func:`path_family`, ``M = max omega``."""
    box = env.box
    d = box.d
    M = float(np.max(env.omega))
    total = 0.0
    for path in path_family(box, x, i):
        k = len(path) - 1
        prod = 1.0
        for a, b in zip(path[:-1], path[1:]):
            prod *= env.conductance(a, b)
        total += t ** k / (math.factorial(k) * (2 * d * M) ** (k - 1)) * prod
    return float(np.exp(-t) * total)


def _est_om(env, n: int, slack: float) -> IneqReport:
    if n % 2 == 0 or n < 1:
        raise DomainError("est_om needs an odd n >= 1")
    spec = getattr(env, "spec", None)
    if spec is None or spec.kind != "vertex_combine" or spec.combine not in ("min", "product"):
        raise DomainError("est_om needs a min- or product-combine environment")
    box = env.box
    d = box.d
    W = env.conductance_matrix
    mu = np.asarray(env.mu)
    p = (W.multiply(1.0 / mu[:, None])).tocsr()
    rows_x, rows_y = box.tail, box.head
    worst, viol = 0.0, 0
    for x in np.unique(rows_x):
        v = np.zeros(box.n_vertices)
        v[x] = 1.0
        for _ in range(n):
            v = p.T @ v
        sel = rows_x == x
        lhs = mu[x] * v[rows_y[sel]]
        rhs = (2 * d) ** n * env.omega[sel]
        viol += int(np.sum(lhs > rhs * (1 + slack)))
        worst = max(worst, float(np.max(lhs / rhs)))
    return IneqReport("est_om", worst, 1.0, worst, viol > 0, slack, None,
                      details={"n": n, "violations": viol, "n_edges": box.n_edges})


def _low_est_path(env, t: float, tol: float) -> IneqReport:
    box = env.box
    vals, err = edge_kernel_values(env, CSRW, t, tol)
    worst, viol = np.inf, 0
    witness = None
    for e in range(box.n_edges):
        x, y = int(box.tail[e]), int(box.head[e])
        i = int(box.edge_axis[e])
        # orient from the endpoint at which the edge points along +e_i
        start = x if box.edge_sign[e] > 0 else y
        lb = path_lower_bound(env, t, start, i)
        val = vals[e]
        if val < lb - err[e]:
            viol += 1
            witness = e
        worst = min(worst, val / lb)
    return IneqReport("low_est_path", float(worst), 1.0, float(worst), viol > 0, 0.0, witness,
                      details={"violations": viol, "n_edges": box.n_edges, "t": t})


def _tail_probe(id, law, beta, n_samples, seed, N=2, alpha=1.0):
    rng = rng_for(seed, 0)
    if id == "momZ":
        Z = sample_law(law, (n_samples, N), rng)
        if np.any(Z <= 0) or np.any(Z > 1):
            raise DomainError("momZ needs samples in (0, 1]")
        W = np.sum(Z, axis=1) ** (-beta)
        bound = N * alpha
    else:
        X = sample_law(law, (n_samples, 2), rng)
        if np.any(X <= 0):
            raise DomainError("momX needs positive samples")
        x1, x2 = X[:, 0], X[:, 1]
        W = np.maximum(x1 ** 2 * x2, x1 * x2 ** 2) ** (-beta)
        bound = 2 * alpha / 3
    gamma = tail_index(W)
    finite = gamma > 1
    claimed = beta < bound
    return IneqReport(id, gamma, 1.0, gamma, bool(claimed and not finite), 0.0, None,
                      details={"tail_exponent": gamma, "finite": bool(finite), "claimed_finite": bool(claimed),
                               "beta_bound": bound, "beta": beta, "n_samples": n_samples})


def estimate_inequality_6(id: str, **inputs) -> IneqReport:
    """Checks of the moment machinery.

    * ``est_om``: ``env``, odd ``n``; ``mu(x) p^n(x, y) <= (2d)^n omega(x, y)`` on every edge.
    * ``low_est_path``: ``env``, ``t``; ``mu q mu`` above the path-family bound on every edge.
    * ``momZ``: ``law``, ``beta``, ``N``, ``alpha``, ``n_samples``, ``seed``; tail of ``(Z_1 + ... + Z_N)^{-beta}``.
    * ``momX``: ``law``, ``beta``, ``alpha``, ``n_samples``, ``seed``; tail of ``(X_1^2 X_2 v X_1 X_2^2)^{-beta}``.

    For the two probes, ``violated`` means the fitted tail contradicts a claimed finite moment.
    """
    if id == "est_om":
        return _est_om(inputs["env"], int(inputs.get("n", 1)), float(inputs.get("slack", 1e-12)))
    if id == "low_est_path":
        return _low_est_path(inputs["env"], float(inputs.get("t", 1.0)), float(inputs.get("tol", DEFAULT_TOL)))
    if id in ("momZ", "momX"):
        law = inputs.get("law", {"name": "power", "exponent": 1.0})
        return _tail_probe(id, law, float(inputs["beta"]), int(inputs.get("n_samples", 1_000_000)),
                           int(inputs.get("seed", 0)), int(inputs.get("N", 2)), float(inputs.get("alpha", 1.0)))
    raise DomainError(f"unknown moment check {id!r}; expected est_om, low_est_path, momZ or momX")


# -- near-diagonal constants -------------------------------------------------------

def near_diagonal_constants(env, times, kind=CSRW, tol: float = DEFAULT_TOL) -> dict:
    """Measured ``C12 = min`` and ``C13 = max`` of ``t^{d/2} q(t, 0, x)`` over ``x in B(0, sqrt t)`` per ``t``."""
    box = env.box
    d = box.d
    o = box.index(np.zeros(d, dtype=int))
    times = np.asarray(times, dtype=float)
    r = np.sqrt(times.max())
    dist = box.distance(o, np.arange(box.n_vertices))
    probe = np.nonzero(dist <= r)[0]
    P, _ = heat_kernel_times(env, kind, times, o, tol, probe=probe)
    q = P / speed_measure(env, kind)[probe][None, :]
    lo, hi = [], []
    for i, t in enumerate(times):
        sel = dist[probe] <= np.sqrt(t)
        s = q[i, sel] * t ** (d / 2)
        lo.append(float(s.min()))
        hi.append(float(s.max()))
    return {"t": times.tolist(), "C12": lo, "C13": hi}
