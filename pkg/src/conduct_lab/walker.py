"""Monte Carlo simulation of the walks and displacement covariance estimates.

Every walk is simulated from the same draws: a unit exponential ``E`` and a
uniform ``U`` per jump.  The holding time at ``x`` is ``m(x) E / mu(x)``,
with ``m`` the speed measure, so the CSRW, the VSRW and any time change of the
VSRW share their jump sequence for a fixed seed.  Displacements are tracked
in unwrapped coordinates, which keeps covariances free of wrap-around on
periodic boxes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .environment import Environment, GeneratorSpec, generate
from .errors import DomainError
from .lattice import LatticeBox
from .operators import as_kind, heat_kernel, solve_spd, speed_measure
from .parallel import ordered_map
from .seeding import derive_seed, rng_for

DEFAULT_BATCHES = 16
CHUNK = 8192


@dataclass
class PathSample:
    """One trajectory up to the horizon ``T``.

    ``times[k]`` is the time of the ``k``-th jump (``times[0] = 0``) and
    ``positions[k]`` the vertex occupied from then on.
    """

    seed: int
    kind: str
    T: float
    times: np.ndarray = field(repr=False)
    positions: np.ndarray = field(repr=False)
    displacement: np.ndarray = field(repr=False)

    @property
    def final(self) -> int:
        return int(self.positions[-1])

    @property
    def n_jumps(self) -> int:
        return int(self.positions.size - 1)

    def position_at(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.positions[max(k, 0)])


def _jump_tables(env):
    w = np.asarray(env.slot_weights)
    mu = np.asarray(env.mu)
    cum = np.cumsum(w, axis=1) / mu[:, None]
    cum[:, -1] = 1.0
    return cum


def _holding_scale(env, kind):
    # holding time = scale(x) * Exp(1); infinite where the walk is absorbed
    m = speed_measure(env, kind)
    scale = m / np.asarray(env.mu)
    return np.where(env.box.interior, scale, np.inf)


def _pick_slots(cum_rows, u):
    slot = np.sum(u[:, None] > cum_rows, axis=1)
    return np.minimum(slot, cum_rows.shape[1] - 1)


def simulate(env, kind, x0, T: float, seed: int) -> PathSample:
    """Simulate one path of the walk started at ``x0`` up to time ``T``."""
    if T < 0:
        raise DomainError("horizon T must be non-negative")
    kind = as_kind(kind)
    box = env.box
    x = box.vertex(x0)
    rng = rng_for(seed, 0)
    cum = _jump_tables(env)
    scale = _holding_scale(env, kind)
    nbr = box.neighbors
    steps = box.slot_steps
    times, positions, disp = [0.0], [x], [np.zeros(box.d, dtype=np.int64)]
    t = 0.0
    while True:
        e, u = rng.standard_exponential(), rng.random()
        t = t + scale[x] * e
        if not t <= T:
            break
        s = int(_pick_slots(cum[x][None, :], np.array([u]))[0])
        x = int(nbr[x, s])
        times.append(t)
        positions.append(x)
        disp.append(disp[-1] + steps[s])
    return PathSample(seed, str(kind), float(T), np.array(times), np.array(positions, dtype=np.int64),
                      np.array(disp))


@dataclass
class Endpoints:
    """Final positions and unwrapped displacements of a batch of paths."""

    positions: np.ndarray = field(repr=False)
    displacement: np.ndarray = field(repr=False)
    left_domain: float
    absorbed: float


def _endpoint_chunk(env, kind, x0, T, n, seed, chunk_id):
    box = env.box
    rng = rng_for(seed, chunk_id)
    cum = _jump_tables(env)
    scale = _holding_scale(env, kind)
    nbr = box.neighbors
    steps = box.slot_steps
    pos = np.full(n, x0, dtype=np.int64)
    disp = np.zeros((n, box.d), dtype=np.int64)
    reach = np.zeros(n, dtype=np.int64)
    t = np.zeros(n)
    alive = np.arange(n)
    while alive.size:
        e = rng.standard_exponential(alive.size)
        u = rng.random(alive.size)
        t_new = t[alive] + scale[pos[alive]] * e
        go = t_new <= T
        alive, u, t_new = alive[go], u[go], t_new[go]
        if not alive.size:
            break
        t[alive] = t_new
        s = _pick_slots(cum[pos[alive]], u)
        pos[alive] = nbr[pos[alive], s]
        disp[alive] += steps[s]
        reach[alive] = np.maximum(reach[alive], np.max(np.abs(disp[alive]), axis=1))
    return pos, disp, reach


def simulate_endpoints(env, kind, x0, T: float, n_paths: int, seed: int, threads=None) -> Endpoints:
    """Endpoints at time ``T`` of ``n_paths`` independent paths from ``x0``.

    Paths are generated in chunks of fixed size, each from its own derived
    stream, so the output does not depend on the thread count.
    """
    if T < 0:
        raise DomainError("horizon T must be non-negative")
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    kind = as_kind(kind)
    box = env.box
    x = box.vertex(x0)
    sizes = [min(CHUNK, n_paths - k) for k in range(0, n_paths, CHUNK)]
    parts = ordered_map(lambda j: _endpoint_chunk(env, kind, x, T, sizes[j], seed, j), range(len(sizes)), threads)
    pos = np.concatenate([p[0] for p in parts])
    disp = np.concatenate([p[1] for p in parts])
    reach = np.concatenate([p[2] for p in parts])
    left = float(np.mean(reach > box.L)) if box.periodic else 0.0
    absorbed = 0.0 if box.periodic else float(np.mean(~box.interior[pos]))
    return Endpoints(pos, disp, left, absorbed)


@dataclass
class CovarianceEstimate:
    sigma2: np.ndarray
    stderr: np.ndarray
    n_samples: int
    T: float
    n_envs: int
    left_domain: float = 0.0

    def to_dict(self) -> dict:
        return {"sigma2": self.sigma2.tolist(), "stderr": self.stderr.tolist(), "n_samples": self.n_samples,
                "T": self.T, "n_envs": self.n_envs, "left_domain": self.left_domain}


def covariance_box(d: int, T: float, max_rate: float = 1.0, boundary: str = "periodic") -> LatticeBox:
    """Box with ``L >= 6 sqrt(T * max_rate)``."""
    return LatticeBox(d, max(2, int(np.ceil(6 * np.sqrt(T * max_rate)))), boundary)


def _cov(disp):
    c = np.cov(disp.astype(float), rowvar=False)
    return np.atleast_2d(c)


def estimate_covariance(env_or_spec, kind, T: float, n_paths: int, n_envs: int = 1, box=None,
                        seed: int = 0, x0=None, n_batches: int = DEFAULT_BATCHES,
                        threads=None) -> CovarianceEstimate:
    """``(1/T)`` times the empirical covariance of final displacements.

    ``env_or_spec`` is a realized environment (used as is, ``n_envs`` must be
    1) or a generator spec; environment ``j >= 1`` then uses the derived seed
    ``derive_seed(spec.seed, j)``.  Standard errors come from ``n_batches``
    batch means over the pooled path set.
    """
    if n_paths < 2:
        raise DomainError("covariance estimate needs n_paths >= 2")
    if T <= 0:
        raise DomainError("covariance estimate needs T > 0")
    if n_paths < n_batches:
        n_batches = max(2, n_paths // 2) if n_paths >= 4 else 1
    if isinstance(env_or_spec, Environment):
        if n_envs != 1:
            raise DomainError("a realized environment gives exactly one sample environment")
        envs = [env_or_spec]
    else:
        spec = env_or_spec if isinstance(env_or_spec, GeneratorSpec) else GeneratorSpec.from_dict(env_or_spec)
        if box is None:
            raise DomainError("a box is needed to realize the environment spec")
        envs = []
        for j in range(n_envs):
            s = spec if j == 0 else GeneratorSpec.from_dict({**spec.to_dict(), "seed": derive_seed(spec.seed, j)})
            envs.append(generate(s, box))
    ests, batch_ests, left = [], [], []
    for j, env in enumerate(envs):
        start = env.box.index(np.zeros(env.box.d, dtype=int)) if x0 is None else env.box.vertex(x0)
        ep = simulate_endpoints(env, kind, start, T, n_paths, derive_seed(seed, j), threads)
        ests.append(_cov(ep.displacement) / T)
        left.append(ep.left_domain)
        if n_batches > 1:
            for chunk in np.array_split(ep.displacement, n_batches):
                batch_ests.append(_cov(chunk) / T)
    sigma2 = np.mean(ests, axis=0)
    sigma2 = 0.5 * (sigma2 + sigma2.T)
    if batch_ests:
        b = np.array(batch_ests)
        stderr = b.std(axis=0, ddof=1) / np.sqrt(b.shape[0])
    else:
        stderr = np.full_like(sigma2, np.nan)
    return CovarianceEstimate(sigma2, stderr, n_paths * len(envs), float(T), len(envs), float(np.mean(left)))


@dataclass
class Occupancy:
    mc: float
    stderr: float
    exact: float | None
    n_paths: int
    cube: np.ndarray = field(repr=False)


def cube_members(box, n: int, x, delta: float) -> np.ndarray:
    """Vertices of ``n C(x, delta) = {z : |z - n x|_inf <= n delta}``; must lie inside the box."""
    x = np.asarray(x, dtype=float).reshape(box.d)
    c = n * x
    r = n * delta
    lo = np.ceil(c - r - 1e-12).astype(int)
    hi = np.floor(c + r + 1e-12).astype(int)
    if np.any(lo < -box.L) or np.any(hi > box.L):
        raise DomainError(f"cube n C(x, delta) leaves the box: needs L >= {int(np.max(np.abs([lo, hi])))}")
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.d)
    return box.index(pts)


def cube_occupancy(env, kind, n: int, t: float, x, delta: float, n_paths: int, seed: int = 0,
                   exact: bool = True, threads=None, tol: float = 1e-10) -> Occupancy:
    """``P_0[n^{-1} Y_{n^2 t} in C(x, delta)]`` by simulation and, if asked, from the exact kernel."""
    if n < 1:
        raise DomainError("n must be at least 1")
    if t < 0:
        raise DomainError("t must be non-negative")
    box = env.box
    members = cube_members(box, n, x, delta)
    origin = box.index(np.zeros(box.d, dtype=int))
    ep = simulate_endpoints(env, kind, origin, n ** 2 * t, n_paths, seed, threads)
    c = n * np.asarray(x, dtype=float).reshape(box.d)
    hit = np.all(np.abs(ep.displacement - c) <= n * delta + 1e-12, axis=1)
    p = float(hit.mean())
    se = float(np.sqrt(max(p * (1 - p), 0.0) / n_paths))
    ex = None
    if exact:
        if t == 0:
            ex = float(origin in set(members.tolist()))
        else:
            ex = float(np.sum(heat_kernel(env, kind, n ** 2 * t, origin, tol).P[members]))
    return Occupancy(p, se, ex, int(n_paths), members)


def homogenized_covariance(env, kind="CSRW", tol: float = 1e-10) -> np.ndarray:
    """Effective covariance of the walk on a periodic environment, from the corrector.

    Solves ``L chi_i = -L x_i`` on the torus (grounded at vertex 0), forms
    ``a_ij = |T|^{-1} sum_e omega(e) (s_i(e) + grad chi_i(e)) (s_j(e) + grad chi_j(e))``
    and returns ``2 a`` for the VSRW or ``2 a / mean(mu)`` for the CSRW.
    """
    box = env.box
    if not box.periodic:
        raise DomainError("the corrector problem needs a periodic box")
    kind = as_kind(kind)
    d = box.d
    om = np.asarray(env.omega)
    step = np.zeros((box.n_edges, d))
    step[np.arange(box.n_edges), box.edge_axis] = box.edge_sign
    W = env.conductance_matrix
    A = (sp.diags(np.asarray(env.mu)) - W).tocsr()[1:, 1:]
    tail, head = box.tail, box.head
    flux = np.zeros((d, box.n_edges))
    for i in range(d):
        # b(x) = sum_y omega(x, y) (y - x)_i, the drift of the coordinate
        f = om * step[:, i]
        b = np.zeros(box.n_vertices)
        np.add.at(b, tail, f)
        np.add.at(b, head, -f)
        chi = np.zeros(box.n_vertices)
        chi[1:], _ = solve_spd(A, b[1:], tol=tol)
        flux[i] = step[:, i] + chi[head] - chi[tail]
    a = (flux * om) @ flux.T / box.n_vertices
    sig = 2 * a
    if kind.tag == "CSRW":
        sig = sig / float(np.mean(env.mu))
    elif kind.tag != "VSRW":
        sig = sig / float(np.mean(kind.speed))
    return 0.5 * (sig + sig.T)
