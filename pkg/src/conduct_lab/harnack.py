"""Harmonic and caloric functions on balls, Harnack ratios, near-diagonal
heat-kernel constants and oscillation decay.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .lattice import avg_norm, ball
from .operators import (CSRW, DEFAULT_TOL, as_kind, generator_matrix, heat_kernel,
                        heat_kernel_times, solve_spd, speed_measure)

POSITIVITY_FLOOR = 1e-300
DEFAULT_TIMES_PER_QUARTER = 64


@dataclass(frozen=True, eq=False)
class DirichletProblem:
    """Solution ``u`` of ``L u = 0`` on ``B(x0, n)`` with data on the shell ``B(n+1) \\ B(n)``.

    ``u`` is a full vertex field, zero outside ``B(x0, n+1)``.
    """

    env: object = field(repr=False)
    x0: int
    n: int
    inner: np.ndarray = field(repr=False)
    shell: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    residual: float

    @property
    def domain(self) -> np.ndarray:
        return np.union1d(self.inner, self.shell)


@dataclass
class HarnackReport:
    kind: str
    ratio: float
    n: int
    x0: int
    t0: float | None
    p: float
    q: float
    mu_norm: float
    nu_norm: float
    M: float
    details: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"kind": self.kind, "ratio": self.ratio, "n": self.n, "x0": self.x0,
               "t0": "" if self.t0 is None else self.t0, "p": self.p, "q": self.q,
               "mu_norm_p": self.mu_norm, "nu_norm_q": self.nu_norm, "M": self.M}
        for k, v in self.details.items():
            if np.isscalar(v):
                out[k] = v
        return out


def _check_ball_fits(box, x0, n):
    if box.periodic:
        if n > box.L:
            raise DomainError(f"ball of radius {n} wraps around the periodic box (L = {box.L})")
    else:
        reach = int(np.max(np.abs(box.coords[x0]))) + n
        if reach >= box.L:
            raise DomainError(f"ball of radius {n} around the center reaches the absorbing shell; need L > {reach}")


def norm_data(env, x0, n, p, q) -> tuple:
    """``||mu||_{p,B(n)}``, ``||nu||_{q,B(n)}`` and ``M = 1 v ||mu||_{1,B(n)} / ||mu||_{1,B(n/2)}``."""
    B = ball(env.box, x0, n)
    half = ball(env.box, x0, n // 2)
    m = max(1.0, avg_norm(env.mu, B, 1) / avg_norm(env.mu, half, 1))
    return avg_norm(env.mu, B, p), avg_norm(env.nu, B, q), m


def solve_harmonic(env, x0, n: int, boundary, tol: float = DEFAULT_TOL) -> DirichletProblem:
    """Solve the Dirichlet problem on ``B(x0, n)``.

    ``boundary`` is a scalar, an array over the shell vertices in canonical
    order, or a full vertex field read on the shell.  The equation
    ``sum_y omega(x, y) (u(y) - u(x)) = 0`` is the same for all three walk
    kinds.
    """
    box = env.box
    x0 = box.vertex(x0)
    if n < 1:
        raise DomainError("Dirichlet problem needs n >= 1")
    _check_ball_fits(box, x0, n + 1 if box.periodic else n)
    inner = ball(box, x0, n).members
    outer = ball(box, x0, n + 1).members
    shell = np.setdiff1d(outer, inner)
    g = np.asarray(boundary, dtype=float)
    if g.ndim == 0:
        g = np.full(shell.size, float(g))
    elif g.shape == (box.n_vertices,):
        g = g[shell]
    elif g.shape != (shell.size,):
        raise DomainError(f"boundary data must have {shell.size} shell values or a full field")
    if not np.all(np.isfinite(g)):
        raise DomainError("boundary data must be finite")
    W = env.conductance_matrix
    A = (sp.diags(np.asarray(env.mu)) - W).tocsr()[inner][:, inner]
    # solve for u - min(g): constants are harmonic, so constant data comes out exact
    base = float(g.min())
    rhs = W[inner][:, shell] @ (g - base)
    x, _ = solve_spd(sp.csr_matrix(A), rhs, tol=tol)
    u = np.zeros(box.n_vertices)
    u[shell] = g
    u[inner] = base + x
    Lu = (W @ u - np.asarray(env.mu) * u)[inner]
    scale = max(float(np.max(env.mu[inner])) * max(float(np.max(np.abs(g))), 1e-300), 1e-300)
    return DirichletProblem(env, x0, n, inner, shell, u, float(np.max(np.abs(Lu)) / scale))


def generator_residuals(problem: DirichletProblem, kinds=("CSRW", "VSRW")) -> dict:
    """Sup of ``|L u|`` over ``B(n)`` for each walk kind."""
    out = {}
    for k in kinds:
        kind = as_kind(k)
        out[str(kind)] = float(np.max(np.abs((generator_matrix(problem.env, kind) @ problem.u)[problem.inner])))
    return out


def ehi_ratio(problem: DirichletProblem, p: float | None = None, q: float | None = None,
              inner_radius: int | None = None) -> HarnackReport:
    """``max u / min u`` over ``B(x0, floor(n/2))`` (or ``inner_radius``) and the norm data."""
    env = problem.env
    d = env.box.d
    p = 2 * d if p is None else p
    q = 2 * d if q is None else q
    r = problem.n // 2 if inner_radius is None else int(inner_radius)
    if not 0 <= r <= problem.n:
        raise DomainError("inner radius must lie in [0, n]")
    region = ball(env.box, problem.x0, r).members
    vals = problem.u[region]
    if np.any(vals <= 0):
        raise DomainError("Harnack ratio needs a positive harmonic function on the inner ball")
    mu_n, nu_n, m = norm_data(env, problem.x0, problem.n, p, q)
    ratio = float(vals.max() / vals.min())
    return HarnackReport("elliptic", ratio, problem.n, problem.x0, None, p, q, mu_n, nu_n, m,
                         details={"inner_radius": r, "residual": problem.residual})


def cylinder_ratio(minus_values, plus_values) -> float:
    """``max`` over the lower cylinder divided by ``min`` over the upper one."""
    lo = np.min(plus_values)
    if lo <= POSITIVITY_FLOOR:
        raise DomainError(f"caloric function drops to {lo:.3e} below the positivity floor; use a larger t0")
    return float(np.max(minus_values) / lo)


def phi_times(n: int, t0: float, n_times: int = DEFAULT_TIMES_PER_QUARTER) -> tuple:
    minus = np.linspace(t0 + n ** 2 / 4, t0 + n ** 2 / 2, n_times)
    plus = np.linspace(t0 + 3 * n ** 2 / 4, t0 + n ** 2, n_times)
    return minus, plus


def phi_ratio(env, x0, n: int, t0: float, source, kind=CSRW, n_times: int = DEFAULT_TIMES_PER_QUARTER,
              tol: float = DEFAULT_TOL, p: float | None = None, q: float | None = None) -> HarnackReport:
    """Parabolic Harnack ratio of the caloric function ``u(t, x) = q(t, x, source)``.

    ``u`` is evaluated on ``n_times`` equispaced times in each of
    ``[t0 + n^2/4, t0 + n^2/2]`` and ``[t0 + 3n^2/4, t0 + n^2]`` over
    ``B(x0, floor(n/2))``.  By symmetry of the density, ``q(t, x, y)`` is read
    off the kernel launched at ``y``.
    """
    box = env.box
    kind = as_kind(kind)
    x0 = box.vertex(x0)
    src = box.vertex(source)
    if n < 2:
        raise DomainError("parabolic Harnack ratio needs n >= 2")
    if t0 < 0:
        raise DomainError("t0 must be non-negative")
    _check_ball_fits(box, x0, n)
    d = box.d
    p = 2 * d if p is None else p
    q = 2 * d if q is None else q
    region = ball(box, x0, n // 2).members
    minus, plus = phi_times(n, t0, n_times)
    P, errs = heat_kernel_times(env, kind, np.concatenate([minus, plus]), src, tol, probe=region)
    u = P / speed_measure(env, kind)[region][None, :]
    ratio = cylinder_ratio(u[:n_times], u[n_times:])
    mu_n, nu_n, m = norm_data(env, x0, n, p, q)
    return HarnackReport("parabolic", ratio, n, x0, float(t0), p, q, mu_n, nu_n, m,
                         details={"source": src, "n_times": n_times, "err": float(errs.max())})


@dataclass
class NearDiagonal:
    t: float
    x1: int
    radius: int
    C_up: float
    C_low: float
    sup_scaled: float
    err: float


def near_diagonal_check(env, t: float, x1, kind=CSRW, tol: float = DEFAULT_TOL) -> NearDiagonal:
    """Smallest constants in ``q <= C_up / mu[B]`` (all ``x2``) and
    ``q >= 1 / (C_low^2 |B|)`` (``x2`` in ``B``), with ``B = B(x1, sqrt(t)/2)``.
    """
    box = env.box
    if np.sqrt(t) > box.L / 2:
        raise DomainError(f"near-diagonal check needs sqrt(t) <= L/2, got t={t}, L={box.L}")
    x1 = box.vertex(x1)
    kf = heat_kernel(env, kind, t, x1, tol)
    q = kf.q
    r = int(np.floor(np.sqrt(t) / 2))
    B = ball(box, x1, r).members
    mass = float(np.sum(env.mu[B]))
    c_up = float(q.max() * mass)
    low = float(q[B].min())
    c_low = float(np.sqrt(1.0 / (low * B.size))) if low > 0 else float("inf")
    return NearDiagonal(float(t), x1, r, c_up, c_low, float(q.max() * t ** (box.d / 2)), kf.err)


@dataclass
class HolderDecay:
    radii: list
    osc: list
    ratios: list
    theta: float | None
    zero_tail: bool


def _fit_decay(radii, osc):
    radii = np.asarray(radii, dtype=float)
    osc = np.asarray(osc, dtype=float)
    ratios = [float(osc[k + 1] / osc[k]) if osc[k] > 0 else 0.0 for k in range(osc.size - 1)]
    if np.any(osc <= 0):
        return HolderDecay(radii.tolist(), osc.tolist(), ratios, None, True)
    slope = np.polyfit(np.log(radii), np.log(osc), 1)[0] if radii.size >= 2 else None
    return HolderDecay(radii.tolist(), osc.tolist(), ratios, None if slope is None else float(slope), False)


def holder_decay(box, u, x0, radii) -> HolderDecay:
    """Oscillation ``max - min`` of a field over nested balls and the fitted exponent."""
    radii = sorted({int(r) for r in radii}, reverse=True)
    u = np.asarray(u, dtype=float)
    osc = []
    for r in radii:
        vals = u[ball(box, x0, r).members]
        osc.append(float(vals.max() - vals.min()))
    return _fit_decay(radii, osc)


def holder_decay_caloric(env, source, x0, T0: float, radii, kind=CSRW, n_times: int = 16,
                         tol: float = DEFAULT_TOL) -> HolderDecay:
    """Oscillation of ``q(t, x, source)`` over cylinders ``[T0 - R^2, T0] x B(x0, R)``."""
    box = env.box
    kind = as_kind(kind)
    radii = sorted({int(r) for r in radii}, reverse=True)
    if T0 - radii[0] ** 2 < 0:
        raise DomainError("cylinders must start at non-negative times: need T0 >= R_0^2")
    region = ball(box, x0, radii[0]).members
    grids = [np.linspace(T0 - r ** 2, T0, n_times) for r in radii]
    times = np.unique(np.concatenate(grids))
    P, _ = heat_kernel_times(env, kind, times, source, tol, probe=region)
    u = P / speed_measure(env, kind)[region][None, :]
    dist = box.distance(x0, region)
    osc = []
    for r, g in zip(radii, grids):
        rows = np.isin(times, g)
        cols = dist <= r
        block = u[np.ix_(rows, cols)]
        osc.append(float(block.max() - block.min()))
    return _fit_decay(radii, osc)
