"""Finite lattice boxes, balls, discrete calculus and averaged norms.

A box is the vertex set ``{-L, ..., L}^d`` with nearest-neighbour edges, wrapped
around in ``periodic`` mode.  In ``absorbing`` mode the outer shell
``max_i |x_i| = L`` is the absorbing boundary: those vertices carry edges (so
conductances next to the boundary are defined) but walks stop there.

Vertices are numbered in C order of their coordinates, which is lexicographic
order, and every edge is stored with its smaller-index endpoint as the tail
``e-`` and the other endpoint as the head ``e+``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError

BOUNDARY_MODES = ("periodic", "absorbing")


@dataclass(frozen=True)
class LatticeBox:
    """The box ``{-L..L}^d`` with periodic or absorbing boundary.

    Parameters
    ----------
    d : int
        Dimension, at least 1.
    L : int
        Half-extent, at least 1.
    boundary : {"periodic", "absorbing"}
    """

    d: int
    L: int
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"dimension must be a positive integer, got {self.d!r}")
        if int(self.L) != self.L or self.L < 1:
            raise DomainError(f"half-extent L must be a positive integer, got {self.L!r}")
        if self.boundary not in BOUNDARY_MODES:
            raise DomainError(f"boundary must be one of {BOUNDARY_MODES}, got {self.boundary!r}")

    @property
    def side(self) -> int:
        return 2 * self.L + 1

    @property
    def shape(self) -> tuple:
        return (self.side,) * self.d

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def n_vertices(self) -> int:
        return self.side ** self.d

    @property
    def n_edges(self) -> int:
        return int(self.tail.size)

    @cached_property
    def coords(self) -> np.ndarray:
        """Integer coordinates, shape ``(n_vertices, d)``, in canonical order."""
        grids = np.indices(self.shape).reshape(self.d, -1).T
        c = grids - self.L
        c.setflags(write=False)
        return c

    def index(self, coord) -> np.ndarray | int:
        """Vertex index of one coordinate vector or of a ``(k, d)`` array.

        Periodic boxes wrap coordinates; absorbing boxes reject points outside.
        """
        c = np.asarray(coord, dtype=np.int64)
        single = c.ndim == 1
        c = np.atleast_2d(c)
        if c.shape[-1] != self.d:
            raise DomainError(f"coordinate has {c.shape[-1]} components, box has d={self.d}")
        shifted = c + self.L
        if self.periodic:
            shifted = np.mod(shifted, self.side)
        elif np.any((shifted < 0) | (shifted >= self.side)):
            raise DomainError(f"coordinate outside the box {{-{self.L}..{self.L}}}^{self.d}")
        idx = np.ravel_multi_index(tuple(shifted.T), self.shape)
        return int(idx[0]) if single else idx

    def vertex(self, v) -> int:
        """Normalize a vertex given as an index or as a coordinate tuple."""
        if np.ndim(v) == 0:
            i = int(v)
            if not 0 <= i < self.n_vertices:
                raise DomainError(f"vertex index {i} outside the box")
            return i
        return self.index(v)

    @cached_property
    def _edge_tables(self):
        d, n = self.d, self.n_vertices
        c = self.coords
        tails, heads, dirs, signs = [], [], [], []
        base = np.arange(n)
        for i in range(d):
            step = np.zeros(d, dtype=np.int64)
            step[i] = 1
            target = c + step
            if self.periodic:
                keep = np.ones(n, dtype=bool)
            else:
                keep = target[:, i] <= self.L
            u = base[keep]
            v = self.index(target[keep])
            lo = np.minimum(u, v)
            hi = np.maximum(u, v)
            # displacement tail -> head along axis i, in unwrapped coordinates
            sgn = np.where(lo == u, 1, -1)
            tails.append(lo)
            heads.append(hi)
            dirs.append(np.full(lo.size, i))
            signs.append(sgn)
        tail = np.concatenate(tails)
        head = np.concatenate(heads)
        axis = np.concatenate(dirs)
        sign = np.concatenate(signs)
        order = np.lexsort((head, tail))
        tail, head, axis, sign = tail[order], head[order], axis[order], sign[order]

        nbr = np.full((n, 2 * d), -1, dtype=np.int64)
        nbr_edge = np.full((n, 2 * d), -1, dtype=np.int64)
        eid = np.arange(tail.size)
        # slot 2i holds the +e_i neighbour, slot 2i+1 the -e_i neighbour
        plus_from = np.where(sign > 0, tail, head)
        plus_to = np.where(sign > 0, head, tail)
        nbr[plus_from, 2 * axis] = plus_to
        nbr_edge[plus_from, 2 * axis] = eid
        nbr[plus_to, 2 * axis + 1] = plus_from
        nbr_edge[plus_to, 2 * axis + 1] = eid
        for a in (tail, head, axis, sign, nbr, nbr_edge):
            a.setflags(write=False)
        return tail, head, axis, sign, nbr, nbr_edge

    @property
    def tail(self) -> np.ndarray:
        """Edge tails ``e-`` (smaller index endpoint)."""
        return self._edge_tables[0]

    @property
    def head(self) -> np.ndarray:
        """Edge heads ``e+``."""
        return self._edge_tables[1]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._edge_tables[2]

    @property
    def edge_sign(self) -> np.ndarray:
        """+1 if ``e+ = e- + e_axis`` in unwrapped coordinates, -1 otherwise."""
        return self._edge_tables[3]

    @property
    def neighbors(self) -> np.ndarray:
        """``(n_vertices, 2d)`` table; slot ``2i`` is ``x+e_i``, ``2i+1`` is ``x-e_i``, -1 if absent."""
        return self._edge_tables[4]

    @property
    def neighbor_edges(self) -> np.ndarray:
        return self._edge_tables[5]

    @property
    def slot_steps(self) -> np.ndarray:
        """Unit displacement of each neighbour slot, shape ``(2d, d)``."""
        steps = np.zeros((2 * self.d, self.d), dtype=np.int64)
        for i in range(self.d):
            steps[2 * i, i] = 1
            steps[2 * i + 1, i] = -1
        return steps

    @cached_property
    def interior(self) -> np.ndarray:
        """Boolean mask of non-absorbing vertices."""
        if self.periodic:
            m = np.ones(self.n_vertices, dtype=bool)
        else:
            m = np.max(np.abs(self.coords), axis=1) < self.L
        m.setflags(write=False)
        return m

    def edge_index(self, x, y) -> int:
        """Index of the edge joining vertices ``x`` and ``y``."""
        x, y = self.vertex(x), self.vertex(y)
        hit = np.nonzero(self.neighbors[x] == y)[0]
        if hit.size == 0:
            raise DomainError(f"vertices {x} and {y} are not adjacent")
        return int(self.neighbor_edges[x, hit[0]])

    def distance(self, x, ys=None) -> np.ndarray:
        """Graph (l1) distance from ``x`` to ``ys`` (default: every vertex).

        On periodic boxes this is the toroidal l1 distance.
        """
        x = self.vertex(x)
        others = self.coords if ys is None else self.coords[np.asarray(ys, dtype=np.int64)]
        diff = np.abs(others - self.coords[x])
        if self.periodic:
            diff = np.minimum(diff, self.side - diff)
        return diff.sum(axis=1)

    def to_dict(self) -> dict:
        return {"d": int(self.d), "L": int(self.L), "boundary": self.boundary}

    @classmethod
    def from_dict(cls, data: dict) -> "LatticeBox":
        return cls(int(data["d"]), int(data["L"]), data.get("boundary", "periodic"))


@dataclass(frozen=True)
class Ball:
    """Closed graph-distance ball intersected with the box."""

    box: LatticeBox
    center: int
    radius: int
    members: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.members.size)

    def __len__(self):
        return self.size


def ball(box: LatticeBox, center, r) -> Ball:
    """Vertices within graph distance ``r`` of ``center``.

    Examples
    --------
    >>> box = LatticeBox(2, 5)
    >>> ball(box, (0, 0), 2).size
    13
    """
    if r < 0 or int(r) != r:
        raise DomainError(f"radius must be a non-negative integer, got {r!r}")
    c = box.vertex(center)
    dist = box.distance(c)
    members = np.nonzero(dist <= r)[0]
    members.setflags(write=False)
    return Ball(box, c, int(r), members)


def _as_set(A) -> np.ndarray:
    if isinstance(A, Ball):
        return A.members
    return np.unique(np.asarray(A, dtype=np.int64))


def relative_boundary(box: LatticeBox, A, B) -> np.ndarray:
    """Relative internal boundary: points of ``A`` with a neighbour in ``B \\ A``."""
    a, b = _as_set(A), _as_set(B)
    if not np.all(np.isin(a, b)):
        raise DomainError("relative boundary needs A to be a subset of B")
    outside = np.zeros(box.n_vertices, dtype=bool)
    outside[b] = True
    outside[a] = False
    nb = box.neighbors[a]
    touches = np.zeros(a.size, dtype=bool)
    valid = nb >= 0
    touches |= np.any(np.where(valid, outside[np.where(valid, nb, 0)], False), axis=1)
    return a[touches]


def avg_norm(f, A, p, weight=None) -> float:
    """Space-averaged ``l^p`` norm ``(|A|^-1 sum_A |f|^p w)^(1/p)``.

    ``f`` and ``weight`` are full vertex fields; ``p = inf`` gives the maximum of
    ``|f|`` over ``A`` (the weight is ignored there).
    """
    idx = _as_set(A)
    if idx.size == 0:
        raise DomainError("averaged norm over an empty set")
    vals = np.abs(np.asarray(f, dtype=float)[idx])
    if np.isinf(p):
        return float(vals.max())
    if p < 1:
        raise DomainError(f"norm exponent must lie in [1, inf], got {p}")
    w = 1.0 if weight is None else np.asarray(weight, dtype=float)[idx]
    if np.any(np.asarray(w) < 0):
        raise DomainError("weights must be non-negative")
    return float((np.sum(vals ** p * w) / idx.size) ** (1.0 / p))


def _vertex_values(box, f, name="f"):
    arr = np.asarray(f, dtype=float)
    if arr.shape != (box.n_vertices,):
        raise DomainError(f"{name} has shape {arr.shape}, expected ({box.n_vertices},) for this box")
    return arr


def _edge_values(box, F, name="F"):
    arr = np.asarray(F, dtype=float)
    if arr.shape != (box.n_edges,):
        raise DomainError(f"{name} has shape {arr.shape}, expected ({box.n_edges},) for this box")
    return arr


def gradient(box: LatticeBox, f) -> np.ndarray:
    """Edge field ``f(e+) - f(e-)``."""
    f = _vertex_values(box, f)
    return f[box.head] - f[box.tail]


def divergence(box: LatticeBox, F) -> np.ndarray:
    """Adjoint of :func:`gradient`: inflow at heads minus outflow at tails."""
    F = _edge_values(box, F)
    n = box.n_vertices
    return np.bincount(box.head, F, minlength=n) - np.bincount(box.tail, F, minlength=n)


def left_product(box: LatticeBox, f, F) -> np.ndarray:
    """``(f . F)(e) = f(e-) F(e)``."""
    return _vertex_values(box, f)[box.tail] * _edge_values(box, F)


def right_product(box: LatticeBox, F, f) -> np.ndarray:
    """``(F . f)(e) = f(e+) F(e)``."""
    return _vertex_values(box, f)[box.head] * _edge_values(box, F)


def edge_weights(env, weight=None, eta=None) -> np.ndarray:
    """Conductances, optionally modulated by a cutoff.

    ``weight="eta2"`` averages ``eta^2`` over the two endpoints and
    ``weight="min_eta2"`` takes the smaller endpoint value.
    """
    box = env.box
    omega = env.omega
    if weight is None:
        return omega
    if eta is None:
        raise DomainError(f"weight {weight!r} needs a cutoff eta")
    e2 = _vertex_values(box, getattr(eta, "eta", eta), "eta") ** 2
    if weight == "eta2":
        return 0.5 * (e2[box.head] + e2[box.tail]) * omega
    if weight == "min_eta2":
        return np.minimum(e2[box.head], e2[box.tail]) * omega
    raise DomainError(f"unknown weighting {weight!r}")


def dirichlet_form(env, f, g=None, weight=None, eta=None) -> float:
    """Energy ``sum_e w(e) grad f(e) grad g(e)``; ``g`` defaults to ``f``."""
    box = env.box
    gf = gradient(box, f)
    gg = gf if g is None else gradient(box, g)
    return float(np.sum(edge_weights(env, weight, eta) * gf * gg))


@dataclass(frozen=True)
class Cutoff:
    """A cutoff function with range in [0, 1] and its derived constants."""

    box: LatticeBox
    eta: np.ndarray = field(repr=False)
    zero_set: np.ndarray = field(repr=False)

    @cached_property
    def support(self) -> np.ndarray:
        return np.nonzero(self.eta > 0)[0]

    @cached_property
    def grad_sup(self) -> float:
        """``max_e |grad eta(e)|``."""
        return float(np.max(np.abs(gradient(self.box, self.eta)), initial=0.0))

    def osr(self, power: float = 1.0) -> float:
        """Edge oscillation ratio of ``eta**power``."""
        return osr(self.box, self.eta ** power)


def osr(box: LatticeBox, eta) -> float:
    """Largest one-edge ratio ``eta(y)/eta(x)`` over edges with ``eta(x) != 0``.

    Each ratio is floored at 1, so the result is 1 for a flat profile.  Returns
    1.0 for the zero function.
    """
    eta = _vertex_values(box, eta, "eta")
    u = np.concatenate([box.tail, box.head])
    v = np.concatenate([box.head, box.tail])
    live = eta[u] != 0
    if not np.any(live):
        return 1.0
    ratios = eta[v[live]] / eta[u[live]]
    return float(max(1.0, ratios.max()))


def radial_cutoff(box: LatticeBox, x0, inner: float, outer: float) -> Cutoff:
    """Linear radial cutoff: 1 inside distance ``inner``, 0 from ``outer`` on."""
    if not 0 <= inner < outer:
        raise DomainError(f"radial cutoff needs 0 <= inner < outer, got inner={inner}, outer={outer}")
    dist = box.distance(x0).astype(float)
    eta = 1.0 - np.maximum(dist - inner, 0.0) / (outer - inner)
    eta = np.clip(eta, 0.0, 1.0)
    eta.setflags(write=False)
    return Cutoff(box, eta, np.nonzero(eta == 0)[0])


# -- serialization ---------------------------------------------------------

def field_to_dict(box: LatticeBox, values, kind: str = "vertex", **meta) -> dict:
    """JSON-ready record: box descriptor plus flat values in canonical order."""
    vals = np.asarray(values)
    expected = box.n_vertices if kind in ("vertex", "vertex_set") else box.n_edges
    if vals.shape != (expected,):
        raise DomainError(f"{kind} field needs {expected} values, got shape {vals.shape}")
    if kind == "vertex_set":
        out = [int(v) for v in vals]
    else:
        out = [float(v) for v in vals]
    rec = {"box": box.to_dict(), "kind": kind, "values": out}
    rec.update(meta)
    return rec


def field_from_dict(data: dict):
    """Inverse of :func:`field_to_dict`; returns ``(box, values, meta)``."""
    box = LatticeBox.from_dict(data["box"])
    kind = data.get("kind", "vertex")
    dtype = bool if kind == "vertex_set" else float
    values = np.asarray(data["values"], dtype=dtype)
    meta = {k: v for k, v in data.items() if k not in ("box", "kind", "values")}
    return box, values, meta


def vertex_set_to_dict(box: LatticeBox, members) -> dict:
    mask = np.zeros(box.n_vertices, dtype=np.int64)
    mask[_as_set(members)] = 1
    return field_to_dict(box, mask, kind="vertex_set")


def dumps_field(box, values, kind="vertex", **meta) -> str:
    return json.dumps(field_to_dict(box, values, kind, **meta))
