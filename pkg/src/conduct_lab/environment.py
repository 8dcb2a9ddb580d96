"""Conductance environments: generation, serialization and moment diagnostics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import DomainError
from .lattice import LatticeBox, avg_norm, ball
from .parallel import ordered_map
from .seeding import rng_for

log = logging.getLogger(__name__)

KINDS = ("constant", "iid", "vertex_combine", "dgff", "trap")
COMBINES = ("min", "max", "product", "sum")
LAWS = ("uniform", "lognormal", "power", "two_point")

# above this many interior vertices the DGFF is sampled by a sparse solve
DGFF_DENSE_LIMIT = 4096


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for an environment.

    ``law`` is a dict with a ``name`` key and its parameters:

    * ``uniform``: ``low``, ``high`` with ``0 < low <= high``
    * ``lognormal``: ``mean``, ``sigma`` of the underlying normal
    * ``power``: ``exponent`` g, sample ``U**g`` with ``U`` uniform on (0, 1]
    * ``two_point``: ``low``, ``high``, ``p`` = probability of ``high``
    """

    kind: str = "constant"
    value: float = 1.0
    law: dict | None = None
    combine: str = "min"
    alpha: float = 1.0
    beta: float = 1.0
    k0: int = 1
    k_max: int | None = None
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown environment kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "constant" and not (np.isfinite(self.value) and self.value > 0):
            raise DomainError(f"constant conductance must be positive and finite, got {self.value}")
        if self.kind in ("iid", "vertex_combine"):
            check_law(self.law)
        if self.kind == "vertex_combine" and self.combine not in COMBINES:
            raise DomainError(f"combine mode must be one of {COMBINES}, got {self.combine!r}")
        if self.kind == "trap":
            if not (self.alpha > 0 and self.beta > 0):
                raise DomainError(f"trap exponents need alpha > 0 and beta > 0, got {self.alpha}, {self.beta}")
            if int(self.k0) != self.k0 or self.k0 < 1:
                raise DomainError(f"trap start level k0 must be a positive integer, got {self.k0}")
        if self.kind == "dgff" and not self.scale > 0:
            raise DomainError(f"dgff variance scale must be positive, got {self.scale}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def check_law(law):
    if not isinstance(law, dict) or "name" not in law:
        raise DomainError("a law must be a dict with a 'name' key")
    name = law["name"]
    if name not in LAWS:
        raise DomainError(f"unknown law {name!r}; expected one of {LAWS}")
    if name in ("uniform", "two_point"):
        lo, hi = float(law["low"]), float(law["high"])
        if not lo > 0:
            raise DomainError(f"law {name} has non-positive support (low={lo})")
        if hi < lo:
            raise DomainError(f"law {name} needs high >= low")
        if name == "two_point" and not 0 <= float(law["p"]) <= 1:
            raise DomainError("two_point probability must lie in [0, 1]")
    elif name == "lognormal":
        if not float(law.get("sigma", 1.0)) >= 0:
            raise DomainError("lognormal sigma must be non-negative")
    elif name == "power":
        if not float(law["exponent"]) > 0:
            raise DomainError("power law exponent must be positive")


def sample_law(law: dict, size, rng: np.random.Generator) -> np.ndarray:
    check_law(law)
    name = law["name"]
    if name == "uniform":
        return rng.uniform(float(law["low"]), float(law["high"]), size)
    if name == "lognormal":
        return np.exp(rng.normal(float(law.get("mean", 0.0)), float(law.get("sigma", 1.0)), size))
    if name == "power":
        u = 1.0 - rng.random(size)  # (0, 1]
        return u ** float(law["exponent"])
    lo, hi, p = float(law["low"]), float(law["high"]), float(law["p"])
    return np.where(rng.random(size) < p, hi, lo)


def combine(mode: str, a, b):
    if mode == "min":
        return np.minimum(a, b)
    if mode == "max":
        return np.maximum(a, b)
    if mode == "product":
        return a * b
    if mode == "sum":
        return a + b
    raise DomainError(f"unknown combine mode {mode!r}")


@dataclass(frozen=True, eq=False)
class Environment:
    """Positive conductances on the edges of a box, in canonical edge order."""

    box: LatticeBox
    omega: np.ndarray = field(repr=False)
    spec: GeneratorSpec | None = None
    provenance: dict = field(default_factory=dict)
    vertex_data: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if w.shape != (self.box.n_edges,):
            raise DomainError(f"need {self.box.n_edges} conductances, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DomainError("conductances must be positive and finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "omega", w)

    @cached_property
    def mu(self) -> np.ndarray:
        b = self.box
        m = np.bincount(b.tail, self.omega, b.n_vertices) + np.bincount(b.head, self.omega, b.n_vertices)
        m.setflags(write=False)
        return m

    @cached_property
    def nu(self) -> np.ndarray:
        b = self.box
        inv = 1.0 / self.omega
        m = np.bincount(b.tail, inv, b.n_vertices) + np.bincount(b.head, inv, b.n_vertices)
        m.setflags(write=False)
        return m

    @cached_property
    def conductance_matrix(self) -> sp.csr_matrix:
        """Symmetric sparse matrix ``W[x, y] = omega(x, y)``."""
        b = self.box
        rows = np.concatenate([b.tail, b.head])
        cols = np.concatenate([b.head, b.tail])
        vals = np.concatenate([self.omega, self.omega])
        return sp.csr_matrix((vals, (rows, cols)), shape=(b.n_vertices, b.n_vertices))

    @cached_property
    def slot_weights(self) -> np.ndarray:
        """Conductance per neighbour slot, 0 for missing neighbours."""
        ne = self.box.neighbor_edges
        w = np.where(ne >= 0, self.omega[np.maximum(ne, 0)], 0.0)
        w.setflags(write=False)
        return w

    def conductance(self, x, y) -> float:
        return float(self.omega[self.box.edge_index(x, y)])

    def with_omega(self, omega, **provenance) -> "Environment":
        prov = dict(self.provenance)
        prov.update(provenance)
        return Environment(self.box, omega, self.spec, prov, dict(self.vertex_data))

    def shift(self, z) -> "Environment":
        """The shifted environment ``(tau_z omega)(x, y) = omega(x + z, y + z)`` (periodic boxes)."""
        b = self.box
        if not b.periodic:
            raise DomainError("shifts are defined on periodic boxes only")
        z = np.asarray(z, dtype=np.int64)
        src_t = b.index(b.coords[b.tail] + z)
        src_h = b.index(b.coords[b.head] + z)
        eid = np.array([b.edge_index(u, v) for u, v in zip(src_t, src_h)])
        return Environment(b, self.omega[eid], self.spec, dict(self.provenance, shift=z.tolist()))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "kind": "environment",
            "values": [float(v) for v in self.omega],
            "spec": None if self.spec is None else self.spec.to_dict(),
            "provenance": self.provenance,
            "vertex_data": {k: [float(v) for v in a] for k, a in self.vertex_data.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Environment":
        box = LatticeBox.from_dict(data["box"])
        spec = GeneratorSpec.from_dict(data["spec"]) if data.get("spec") else None
        vd = {k: np.asarray(v, dtype=float) for k, v in data.get("vertex_data", {}).items()}
        return cls(box, np.asarray(data["values"], dtype=float), spec, data.get("provenance", {}), vd)

    def save(self, path):
        """Write JSON, or the compact binary form when the suffix is ``.npz``."""
        path = Path(path)
        if path.suffix == ".npz":
            meta = json.dumps({"box": self.box.to_dict(),
                               "spec": None if self.spec is None else self.spec.to_dict(),
                               "provenance": self.provenance}, sort_keys=True)
            arrays = {f"vd_{k}": v for k, v in self.vertex_data.items()}
            with open(path, "wb") as fh:
                np.savez(fh, omega=self.omega, meta=np.array(meta), **arrays)
        else:
            path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Environment":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["meta"]))
                vd = {k[3:]: z[k].copy() for k in z.files if k.startswith("vd_")}
                box = LatticeBox.from_dict(meta["box"])
                spec = GeneratorSpec.from_dict(meta["spec"]) if meta.get("spec") else None
                return cls(box, z["omega"].copy(), spec, meta.get("provenance", {}), vd)
        return cls.from_dict(json.loads(path.read_text()))


def constant_environment(box: LatticeBox, value: float = 1.0) -> Environment:
    return generate(GeneratorSpec(kind="constant", value=value), box)


def mu(env: Environment, x) -> float:
    return float(env.mu[env.box.vertex(x)])


def nu(env: Environment, x) -> float:
    return float(env.nu[env.box.vertex(x)])


def edge_components(box: LatticeBox, open_edges: np.ndarray) -> list:
    """Group the given edges into connected components.

    Returns a list of edge-index arrays, ordered by the smallest vertex index
    of each component.
    """
    open_edges = np.asarray(open_edges, dtype=np.int64)
    tail, head = box.tail, box.head
    if open_edges.size == 0:
        return []
    n = box.n_vertices
    adj = sp.coo_matrix((np.ones(open_edges.size), (tail[open_edges], head[open_edges])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    roots = labels[tail[open_edges]]
    groups = {}
    for e, r in zip(open_edges, roots):
        groups.setdefault(int(r), []).append(int(e))
    keyed = []
    for edges in groups.values():
        arr = np.array(sorted(edges), dtype=np.int64)
        keyed.append((int(min(tail[arr].min(), head[arr].min())), arr))
    keyed.sort(key=lambda kv: kv[0])
    return [arr for _, arr in keyed]


def adjacent_edges(box: LatticeBox, e: int) -> np.ndarray:
    """Edges sharing an endpoint with ``e``, excluding ``e`` itself."""
    ne = box.neighbor_edges
    cand = np.concatenate([ne[box.tail[e]], ne[box.head[e]]])
    cand = cand[(cand >= 0) & (cand != e)]
    return np.unique(cand)


def _trap_environment(spec: GeneratorSpec, box: LatticeBox, rng) -> tuple:
    if box.d == 2 and 2.0 ** (-spec.k0) >= 0.5:
        log.warning("trap level k0=%s does not put 2^-k0 below the planar bond threshold 1/2", spec.k0)
    xi = rng.random(box.n_edges)
    omega = np.ones(box.n_edges)
    k = int(spec.k0)
    last = k - 1
    traps = []
    while spec.k_max is None or k <= spec.k_max:
        open_edges = np.nonzero(xi <= 2.0 ** (-k))[0]
        if open_edges.size == 0:
            break
        for comp in edge_components(box, open_edges):
            e = int(comp[rng.integers(comp.size)])
            omega[adjacent_edges(box, e)] = 2.0 ** (-spec.beta * k)
            omega[e] = 2.0 ** (spec.alpha * k)
            traps.append((k, e))
        last = k
        k += 1
    return omega, {"trap_levels": [int(spec.k0), int(last)], "n_trap_draws": len(traps)}


def dgff_sample(box: LatticeBox, rng, scale: float = 1.0) -> np.ndarray:
    """Massless Gaussian free field, zero on the outer shell.

    The covariance on the interior is ``scale * (D - W)^{-1}`` for unit
    conductances, i.e. the Green function of the unit-rate variable speed walk
    killed on the shell.
    """
    inner_mask = np.max(np.abs(box.coords), axis=1) < box.L
    inner = np.nonzero(inner_mask)[0]
    phi = np.zeros(box.n_vertices)
    m = inner.size
    if m == 0:
        return phi
    pos = -np.ones(box.n_vertices, dtype=np.int64)
    pos[inner] = np.arange(m)
    tail, head = box.tail, box.head
    keep = inner_mask[tail] | inner_mask[head]
    t, h = tail[keep], head[keep]
    n_e = t.size
    rows = np.concatenate([np.arange(n_e)[inner_mask[h]], np.arange(n_e)[inner_mask[t]]])
    cols = np.concatenate([pos[h[inner_mask[h]]], pos[t[inner_mask[t]]]])
    vals = np.concatenate([np.ones(int(inner_mask[h].sum())), -np.ones(int(inner_mask[t].sum()))])
    B = sp.csr_matrix((vals, (rows, cols)), shape=(n_e, m))
    A = (B.T @ B).tocsc()
    if m <= DGFF_DENSE_LIMIT:
        chol = np.linalg.cholesky(A.toarray())
        z = rng.standard_normal(m)
        x = scipy.linalg.solve_triangular(chol.T, z, lower=False)
    else:
        # B^T xi has covariance A, so A^{-1} B^T xi has covariance A^{-1}
        xi = rng.standard_normal(n_e)
        x = spla.spsolve(A, B.T @ xi)
    phi[inner] = np.sqrt(scale) * x
    return phi


def generate(spec: GeneratorSpec, box: LatticeBox) -> Environment:
    """Build the environment described by ``spec`` on ``box``; deterministic in ``spec.seed``."""
    rng = rng_for(spec.seed, 0)
    prov = {"generator": spec.kind, "seed": int(spec.seed)}
    vd = {}
    if spec.kind == "constant":
        omega = np.full(box.n_edges, float(spec.value))
    elif spec.kind == "iid":
        omega = sample_law(spec.law, box.n_edges, rng)
    elif spec.kind == "vertex_combine":
        theta = sample_law(spec.law, box.n_vertices, rng)
        omega = combine(spec.combine, theta[box.tail], theta[box.head])
        vd["theta"] = theta
    elif spec.kind == "dgff":
        phi = dgff_sample(box, rng, spec.scale)
        omega = np.exp(phi[box.tail] + phi[box.head])
        vd["phi"] = phi
    else:
        omega, extra = _trap_environment(spec, box, rng)
        prov.update(extra)
    return Environment(box, omega, spec, prov, vd)


def find_traps(env: Environment, alpha: float, beta: float, k: int) -> np.ndarray:
    """Edges that are k-traps: ``omega(e) >= 2^(alpha k)`` and every adjacent edge ``<= 2^(-beta k)``."""
    hi = 2.0 ** (alpha * k)
    lo = 2.0 ** (-beta * k)
    out = []
    for e in np.nonzero(env.omega >= hi * (1 - 1e-12))[0]:
        adj = adjacent_edges(env.box, int(e))
        if np.all(env.omega[adj] <= lo * (1 + 1e-12)):
            out.append(int(e))
    return np.array(out, dtype=np.int64)


def trap_levels(env: Environment, alpha: float) -> dict:
    """Map each edge with ``omega > 1`` to the level k with ``omega = 2^(alpha k)``."""
    high = np.nonzero(env.omega > 1)[0]
    return {int(e): int(round(np.log2(env.omega[e]) / alpha)) for e in high}


# -- moments ----------------------------------------------------------------

def tail_index(samples, k: int | None = None) -> float:
    """Hill estimate of the upper tail exponent of positive samples.

    A moment ``E[X]`` is finite when the tail exponent exceeds 1.  Returns
    ``inf`` when the top order statistics are all equal (bounded, flat tail).
    """
    x = np.sort(np.asarray(samples, dtype=float))[::-1]
    n = x.size
    if k is None:
        k = max(10, n // 100)
    k = min(k, n - 1)
    if k < 1:
        return float("inf")
    logs = np.log(x[:k]) - np.log(x[k])
    m = logs.mean()
    return float("inf") if m <= 0 else float(1.0 / m)


def exponent_condition(p, q, d) -> bool:
    """``1/p + 1/q < 2/d`` evaluated in exact rational arithmetic."""
    def inv(v):
        return Fraction(0) if np.isinf(v) else 1 / Fraction(v)
    return inv(p) + inv(q) < Fraction(2, int(d))


@dataclass
class MomentReport:
    p: float
    q: float
    d: int
    mean_pos: float
    se_pos: float
    mean_neg: float
    se_neg: float
    tail_pos: float
    tail_neg: float
    converges_pos: bool
    converges_neg: bool
    condition: bool
    radii: list
    mu_norms: list
    nu_norms: list
    r_hat: int | None
    eps: float
    n_envs: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_se(per_env: list) -> tuple:
    pooled = np.concatenate(per_env)
    mean = float(pooled.mean())
    if len(per_env) >= 2:
        batch = np.array([a.mean() for a in per_env])
        se = float(batch.std(ddof=1) / np.sqrt(batch.size))
    elif pooled.size >= 2:
        se = float(pooled.std(ddof=1) / np.sqrt(pooled.size))
    else:
        se = 0.0
    return mean, se


def moment_report(spec: GeneratorSpec, box: LatticeBox, p: float, q: float, n_envs: int = 1,
                  eps: float = 0.05, threads: int | None = None) -> MomentReport:
    """Monte Carlo moments of ``omega^p`` and ``omega^-q`` plus ergodic-average trajectories.

    Environment ``j`` is generated with a seed derived from ``(spec.seed, j)``
    for ``j >= 1``; ``j = 0`` uses ``spec`` as given and also provides the
    trajectories ``n -> ||mu||_{p,B(0,n)}``, ``||nu||_{q,B(0,n)}``.
    """
    if not (p > 0 and q > 0):
        raise DomainError(f"moment exponents must be positive, got p={p}, q={q}")
    if n_envs < 1:
        raise DomainError("need at least one environment")
    from .seeding import derive_seed

    def make(j):
        s = spec if j == 0 else GeneratorSpec.from_dict(dict(spec.to_dict(), seed=derive_seed(spec.seed, j)))
        return generate(s, box)

    envs = ordered_map(make, range(n_envs), threads)
    pos = [e.omega ** p for e in envs]
    neg = [e.omega ** (-q) for e in envs]
    mp, sp_ = _mean_se(pos)
    mn, sn = _mean_se(neg)
    tp = tail_index(np.concatenate(pos))
    tn = tail_index(np.concatenate(neg))

    env0 = envs[0]
    origin = box.index(np.zeros(box.d, dtype=np.int64))
    r_max = box.L if box.periodic else box.L - 1
    radii, mun, nun = [], [], []
    for n in range(1, max(r_max, 1) + 1):
        B = ball(box, origin, n)
        radii.append(n)
        mun.append(avg_norm(env0.mu, B, p))
        nun.append(avg_norm(env0.nu, B, q))
    r_hat = None
    fm, fn = mun[-1], nun[-1]
    for n, a, b in zip(radii, mun, nun):
        if abs(a - fm) <= eps * fm and abs(b - fn) <= eps * fn:
            r_hat = n
            break
    return MomentReport(p, q, box.d, mp, sp_, mn, sn, tp, tn, bool(tp > 1), bool(tn > 1),
                        exponent_condition(p, q, box.d), radii, mun, nun, r_hat, eps, n_envs,
                        int(sum(a.size for a in pos)))
