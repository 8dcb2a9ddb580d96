"""Walk generators, exact heat kernels by uniformization, and Green kernels.

All three walks jump along the same law ``p(x, y) = omega(x, y) / mu(x)``; they
differ in the holding rate at ``x``: 1 for the constant speed walk (CSRW),
``mu(x)`` for the variable speed walk (VSRW) and ``mu(x) / pi(x)`` for the
walk time-changed by a speed measure ``pi``.  In absorbing boxes the rate is
zero on the outer shell.

Heat kernels are computed with the uniformized series

    P_t = sum_n Pois(n; Lambda t) (I + Q / Lambda)^n,

truncated where the Poisson tail drops below ``tol``.  Every term is a
probability vector, so the tail mass bounds the truncation error in both the
l1 and the sup norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .errors import DomainError, ToleranceError
from .lattice import LatticeBox

DEFAULT_TOL = 1e-10
# ceiling on uniformization series length; longer runs must be split into steps
DEFAULT_MAX_TERMS = 2_000_000
DENSE_SOLVE_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class WalkKind:
    """Walk type; ``speed`` is the speed measure of a time-changed walk."""

    tag: str
    speed: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.tag not in ("CSRW", "VSRW", "time_changed"):
            raise DomainError(f"unknown walk kind {self.tag!r}")
        if self.tag == "time_changed":
            if self.speed is None:
                raise DomainError("a time-changed walk needs a speed measure")
            pi = np.asarray(self.speed, dtype=float)
            if not np.all(np.isfinite(pi)) or np.any(pi <= 0):
                raise DomainError("speed measure must be positive and finite")
            object.__setattr__(self, "speed", pi)

    def __str__(self):
        return self.tag


CSRW = WalkKind("CSRW")
VSRW = WalkKind("VSRW")


def time_changed(pi) -> WalkKind:
    return WalkKind("time_changed", np.asarray(pi, dtype=float))


def as_kind(kind) -> WalkKind:
    if isinstance(kind, WalkKind):
        return kind
    if kind in ("CSRW", "csrw"):
        return CSRW
    if kind in ("VSRW", "vsrw"):
        return VSRW
    raise DomainError(f"unknown walk kind {kind!r}; pass CSRW, VSRW or time_changed(pi)")


def speed_measure(env, kind) -> np.ndarray:
    """``m``: ``mu`` for CSRW, 1 for VSRW, ``pi`` for a time-changed walk."""
    kind = as_kind(kind)
    if kind.tag == "CSRW":
        return np.asarray(env.mu)
    if kind.tag == "VSRW":
        return np.ones(env.box.n_vertices)
    if kind.speed.shape != (env.box.n_vertices,):
        raise DomainError("speed measure does not match the box")
    return kind.speed


def jump_rates(env, kind) -> np.ndarray:
    """Total jump rate per vertex (zero on an absorbing shell)."""
    rate = np.asarray(env.mu) / speed_measure(env, kind)
    return np.where(env.box.interior, rate, 0.0)


def generator_matrix(env, kind) -> sp.csr_matrix:
    """Sparse generator ``Q = M^{-1} (W - diag(mu))``, zero rows on an absorbing shell."""
    m = speed_measure(env, kind)
    scale = np.where(env.box.interior, 1.0 / m, 0.0)
    W = env.conductance_matrix
    Q = sp.diags(scale) @ (W - sp.diags(np.asarray(env.mu)))
    return sp.csr_matrix(Q)


def apply_generator(env, kind, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (env.box.n_vertices,):
        raise DomainError("field does not match the box")
    return generator_matrix(env, kind) @ f


def uniformization_rate(env, kind) -> float:
    return float(np.max(jump_rates(env, kind)))


def poisson_truncation(lam: float, tol: float, max_terms: int = DEFAULT_MAX_TERMS) -> tuple:
    """Smallest ``N`` with ``P[Pois(lam) > N] < tol`` and that tail mass."""
    if lam == 0:
        return 0, 0.0
    n = int(poisson.isf(tol, lam))
    n = max(n, 0)
    while poisson.sf(n, lam) >= tol:
        n += 1
    if n > max_terms:
        raise ToleranceError(
            f"uniformization needs {n} terms (Lambda*t = {lam:.6g}) beyond the ceiling {max_terms}; "
            f"split the time into shorter semigroup steps (evolve(..., theta=...))")
    return n, float(poisson.sf(n, lam))


@dataclass(frozen=True, eq=False)
class KernelField:
    """Law of the walk at time ``t`` started at ``x0``.

    ``P`` is the probability field; ``q = P / m`` is the density with respect
    to the speed measure.  ``err`` bounds ``||P - P_exact||_1`` (hence the sup
    norm error as well).
    """

    t: float
    x0: int
    kind: WalkKind
    P: np.ndarray = field(repr=False)
    m: np.ndarray = field(repr=False)
    err: float
    terms: int = 0
    rate: float = 0.0

    @property
    def q(self) -> np.ndarray:
        return self.P / self.m

    def to_dict(self, box: LatticeBox) -> dict:
        return {"box": box.to_dict(), "kind": "kernel", "values": [float(v) for v in self.P],
                "density": [float(v) for v in self.q], "t": float(self.t), "x0": int(self.x0),
                "walk": str(self.kind), "err": float(self.err), "terms": int(self.terms),
                "rate": float(self.rate)}


def _propagator(env, kind):
    """``(I + Q / Lambda)^T`` in CSR form and ``Lambda``."""
    lam = uniformization_rate(env, kind)
    if lam == 0:
        return None, 0.0
    Q = generator_matrix(env, kind)
    A = sp.identity(env.box.n_vertices, format="csr") + Q / lam
    return sp.csr_matrix(A.T), lam


def _series(At, lam, v0, times, tol, max_terms, probe=None):
    """Accumulate the uniformized series for several times in one pass."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    idx = slice(None) if probe is None else np.asarray(probe, dtype=np.int64)
    width = v0.size if probe is None else idx.size
    out = np.zeros((times.size, width))
    errs = np.zeros(times.size)
    if lam == 0 or np.all(times == 0):
        out[:] = v0[idx]
        return out, errs, 0
    cuts = []
    for j, t in enumerate(times):
        n, e = poisson_truncation(lam * t, tol, max_terms)
        cuts.append(n)
        errs[j] = e
    n_max = max(cuts)
    ns = np.arange(n_max + 1)
    weights = np.zeros((times.size, n_max + 1))
    for j, t in enumerate(times):
        if t == 0:
            weights[j, 0] = 1.0
        else:
            weights[j, :cuts[j] + 1] = poisson.pmf(ns[:cuts[j] + 1], lam * t)
    v = v0.copy()
    for n in range(n_max + 1):
        w = weights[:, n]
        live = w > 0
        if np.any(live):
            out[live] += w[live, None] * v[idx][None, :]
        if n < n_max:
            v = At @ v
    return out, errs, n_max


def heat_kernel(env, kind, t: float, x0, tol: float = DEFAULT_TOL,
                max_terms: int = DEFAULT_MAX_TERMS) -> KernelField:
    """Exact law at time ``t`` of the walk started at ``x0``, with certified error."""
    if tol <= 0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    if t < 0:
        raise DomainError(f"time must be non-negative, got {t}")
    kind = as_kind(kind)
    box = env.box
    x0 = box.vertex(x0)
    m = speed_measure(env, kind)
    v0 = np.zeros(box.n_vertices)
    v0[x0] = 1.0
    At, lam = _propagator(env, kind)
    vals, errs, n = _series(At, lam, v0, [t], tol, max_terms)
    return KernelField(float(t), x0, kind, vals[0], m, float(errs[0]), n, lam)


def heat_kernel_times(env, kind, times, x0, tol: float = DEFAULT_TOL, probe=None,
                      max_terms: int = DEFAULT_MAX_TERMS):
    """Laws at several times from one series pass.

    Returns ``(P, err)`` with ``P[j]`` the probability field at ``times[j]``
    restricted to ``probe`` (all vertices by default).
    """
    if tol <= 0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise DomainError("times must be non-negative")
    kind = as_kind(kind)
    x0 = env.box.vertex(x0)
    v0 = np.zeros(env.box.n_vertices)
    v0[x0] = 1.0
    At, lam = _propagator(env, kind)
    vals, errs, _ = _series(At, lam, v0, times, tol, max_terms, probe)
    return vals, errs


def semigroup_step(k1: KernelField, env, kind, s: float, tol: float = DEFAULT_TOL,
                   max_terms: int = DEFAULT_MAX_TERMS) -> KernelField:
    """Propagate a kernel field by an extra time ``s`` (Chapman-Kolmogorov)."""
    if tol <= 0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    if s < 0:
        raise DomainError(f"step must be non-negative, got {s}")
    kind = as_kind(kind)
    if kind.tag != k1.kind.tag:
        raise DomainError("kernel field was computed for a different walk kind")
    if s == 0:
        return k1
    At, lam = _propagator(env, kind)
    vals, errs, n = _series(At, lam, np.asarray(k1.P, dtype=float), [s], tol, max_terms)
    # the propagator is stochastic, so earlier l1 errors do not grow
    return KernelField(k1.t + s, k1.x0, kind, vals[0], k1.m, k1.err + float(errs[0]), n, lam)


def evolve(env, kind, t: float, x0, tol: float = DEFAULT_TOL, theta: float = 1e5) -> KernelField:
    """Heat kernel at ``t`` via ``ceil(Lambda t / theta)`` semigroup steps.

    Each step keeps its series near ``theta`` terms; certificates add up.
    """
    kind = as_kind(kind)
    lam = uniformization_rate(env, kind)
    steps = max(1, int(np.ceil(lam * t / theta)))
    per = tol / steps
    k = heat_kernel(env, kind, t / steps, x0, per)
    for _ in range(steps - 1):
        k = semigroup_step(k, env, kind, t / steps, per)
    return KernelField(float(t), k.x0, kind, k.P, k.m, k.err, k.terms, k.rate)


def transition_matrix(env, kind, t: float, tol: float = DEFAULT_TOL,
                      max_terms: int = DEFAULT_MAX_TERMS) -> tuple:
    """Dense ``P_t`` (rows are starting points) for small boxes, with its certificate."""
    kind = as_kind(kind)
    n = env.box.n_vertices
    if n > 4000:
        raise DomainError(f"dense transition matrix refused for {n} states")
    lam = uniformization_rate(env, kind)
    if lam == 0 or t == 0:
        return np.eye(n), 0.0
    N, err = poisson_truncation(lam * t, tol, max_terms)
    Q = generator_matrix(env, kind).toarray()
    A = np.eye(n) + Q / lam
    w = poisson.pmf(np.arange(N + 1), lam * t)
    term = np.eye(n)
    out = w[0] * term
    for k in range(1, N + 1):
        term = term @ A
        out += w[k] * term
    return out, err


# -- Green kernels ----------------------------------------------------------

def solve_spd(A, b, tol: float = 1e-12, maxiter: int | None = None) -> tuple:
    """Solve a sparse symmetric positive definite system.

    Dense factorization below :data:`DENSE_SOLVE_LIMIT` unknowns, otherwise
    conjugate gradients with Jacobi preconditioning to relative residual ``tol``.
    Returns ``(x, relative_residual)``.
    """
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0.0
    if n < DENSE_SOLVE_LIMIT:
        x = np.linalg.solve(A.toarray(), b)
    else:
        dinv = 1.0 / A.diagonal()
        M = spla.LinearOperator((n, n), matvec=lambda v: dinv * v, dtype=float)
        x, info = spla.cg(A, b, rtol=tol, atol=0.0, M=M, maxiter=maxiter or 20 * n)
        if info != 0:
            res = np.linalg.norm(A @ x - b) / bnorm
            raise ToleranceError(f"conjugate gradients did not converge, relative residual {res:.3e}")
    res = float(np.linalg.norm(A @ x - b) / bnorm)
    return x, res


@dataclass(frozen=True, eq=False)
class GreenField:
    """Green kernel ``g(x0, .)`` of the killed walk and occupation density ``G = g m``."""

    x0: int
    kind: WalkKind
    g: np.ndarray = field(repr=False)
    m: np.ndarray = field(repr=False)
    method: str
    err: float

    @property
    def G(self) -> np.ndarray:
        return self.g * self.m

    def to_dict(self, box: LatticeBox) -> dict:
        return {"box": box.to_dict(), "kind": "green", "values": [float(v) for v in self.g],
                "x0": int(self.x0), "walk": str(self.kind), "method": self.method,
                "err": float(self.err)}


def _interior_operator(env):
    box = env.box
    inner = np.nonzero(box.interior)[0]
    D = sp.diags(np.asarray(env.mu))
    A = (D - env.conductance_matrix).tocsr()[inner][:, inner]
    return inner, sp.csr_matrix(A)


def green_kernel(env, kind, x0, tol: float = DEFAULT_TOL, method: str = "solve",
                 max_terms: int = DEFAULT_MAX_TERMS) -> GreenField:
    """Green kernel on an absorbing box.

    ``method="solve"`` solves ``(D - W) g = delta_{x0}`` on the non-absorbing
    vertices, which equals ``(-Q) G = delta`` with ``G = g m`` for every walk
    kind.  ``method="series"`` integrates the uniformized heat-kernel series in
    time term by term (each term integrates to ``1/Lambda``), stopping when the
    geometric tail estimate drops below ``tol`` relative to the accumulated mass.
    """
    box = env.box
    if box.periodic:
        raise DomainError("Green kernels need an absorbing box; on a periodic box the walk is recurrent")
    kind = as_kind(kind)
    x0 = box.vertex(x0)
    if not box.interior[x0]:
        raise DomainError("the source lies on the absorbing shell")
    m = speed_measure(env, kind)
    inner, A = _interior_operator(env)
    pos = np.searchsorted(inner, x0)
    g = np.zeros(box.n_vertices)
    if method == "solve":
        rhs = np.zeros(inner.size)
        rhs[pos] = 1.0
        x, res = solve_spd(A, rhs, tol=min(tol, 1e-12))
        g[inner] = x
        return GreenField(x0, kind, g, m, "solve", res)
    if method != "series":
        raise DomainError(f"unknown Green method {method!r}")
    At, lam = _propagator(env, kind)
    At = sp.csr_matrix(At[inner][:, inner])
    v = np.zeros(inner.size)
    v[pos] = 1.0
    acc = np.zeros(inner.size)
    prev = v.sum()
    tail = np.inf
    for _ in range(max_terms):
        acc += v
        v = At @ v
        mass = v.sum()
        r = mass / prev if prev > 0 else 0.0
        prev = mass
        if r < 1:
            tail = mass / (1.0 - r)
            if tail <= tol * acc.sum():
                break
    else:
        raise ToleranceError(f"Green series did not reach tolerance within {max_terms} terms")
    acc += v
    G = acc / lam
    g[inner] = G / m[inner]
    return GreenField(x0, kind, g, m, "series", float(tail / acc.sum()))
