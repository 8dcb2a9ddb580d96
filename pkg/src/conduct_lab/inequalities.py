"""Numerical harnesses for volume regularity, isoperimetry, Poincare and
Sobolev inequalities, and the elementary real inequalities used in energy
estimates.

Inequalities whose constants are not explicit are reported through the
implied constant: the smallest ``C`` for which ``lhs <= C * rhs`` holds on
the tested instance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .lattice import Ball, Cutoff, LatticeBox, avg_norm, ball, dirichlet_form, gradient
from .seeding import rng_for

EXHAUSTIVE_LIMIT = 20
APPENDIX_IDS = ("A1_i", "A1_ii_pow", "A1_ii_log", "A1_iii", "A1_iv", "A1_v", "A2")


@dataclass
class IneqReport:
    id: str
    lhs: float
    rhs: float
    implied_constant: float
    violated: bool | None = None
    slack: float = 0.0
    witness: object = None
    details: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return _ratio(self.lhs, self.rhs)

    def row(self) -> dict:
        return {"id": self.id, "lhs": self.lhs, "rhs": self.rhs,
                "implied_constant": self.implied_constant,
                "witness_ref": "" if self.witness is None else str(self.witness)}


def _ratio(lhs, rhs):
    if rhs == 0:
        return 0.0 if lhs == 0 else float("inf")
    return float(lhs / rhs)


def rho(q: float, d: int) -> float:
    """Sobolev exponent ``q d / (q (d - 2) + d)``; ``d / (d - 2)`` at ``q = inf``."""
    if d < 2:
        raise DomainError(f"rho needs d >= 2, got {d}")
    if np.isinf(q):
        return float("inf") if d == 2 else d / (d - 2)
    if q < 1:
        raise DomainError(f"rho needs q >= 1, got {q}")
    return q * d / (q * (d - 2) + d)


# -- geometry -----------------------------------------------------------------

def volume_regularity(box: LatticeBox, r_max: int) -> IneqReport:
    """Smallest ``C`` with ``r^d / C <= |B(x, r)| <= C r^d`` for ``1 <= r <= r_max``.

    Periodic boxes are translation invariant, so only the origin is scanned;
    absorbing boxes scan every center.
    """
    if not 1 <= r_max < box.L:
        raise DomainError(f"volume scan needs 1 <= r_max < L = {box.L}, got {r_max}")
    centers = [box.index(np.zeros(box.d, dtype=np.int64))] if box.periodic else range(box.n_vertices)
    hi, lo = 0.0, np.inf
    per_r = {}
    for c in centers:
        dist = box.distance(c)
        counts = np.bincount(dist, minlength=r_max + 1)[: r_max + 1].cumsum()
        for r in range(1, r_max + 1):
            v = counts[r] / r ** box.d
            hi, lo = max(hi, v), min(lo, v)
            a, b = per_r.get(r, (0.0, np.inf))
            per_r[r] = (max(a, v), min(b, v))
    c_reg = max(hi, 1.0 / lo)
    return IneqReport("volume_regularity", hi, lo, float(c_reg),
                      details={"per_radius": {r: max(a, 1 / b) for r, (a, b) in per_r.items()}})


def _ball_adjacency(box, members):
    pos = -np.ones(box.n_vertices, dtype=np.int64)
    pos[members] = np.arange(members.size)
    masks = np.zeros(members.size, dtype=np.int64)
    for i, v in enumerate(members):
        for u in box.neighbors[v]:
            if u >= 0 and pos[u] >= 0:
                masks[i] |= 1 << int(pos[u])
    return masks


def _popcount(x):
    x = x.astype(np.uint64)
    c = np.zeros(x.shape, dtype=np.int64)
    while np.any(x):
        c += (x & np.uint64(1)).astype(np.int64)
        x >>= np.uint64(1)
    return c


def isoperimetry(box: LatticeBox, B: Ball, mode: str = "exhaustive", samples: int = 20000,
                 seed: int = 0) -> IneqReport:
    """Smallest ``|rel. boundary of A in B| * r / |A|`` over ``A`` in ``B`` with ``0 < |A| < |B|/2``.

    ``exhaustive`` enumerates every subset (at most 20 vertices);
    ``falsify`` runs a seeded annealing search and reports its best witness,
    which bounds the true minimum from above.
    """
    members = B.members
    m = members.size
    r = B.radius
    adj = _ball_adjacency(box, members)
    if mode == "exhaustive":
        if m > EXHAUSTIVE_LIMIT:
            raise DomainError(f"exhaustive isoperimetry is limited to {EXHAUSTIVE_LIMIT} vertices, "
                              f"ball has {m}; use mode='falsify'")
        full = (1 << m) - 1
        sets = np.arange(1, 1 << m, dtype=np.int64)
        size = _popcount(sets)
        sets, size = sets[2 * size < m], size[2 * size < m]
        if sets.size == 0:
            raise DomainError("ball too small for an admissible subset")
        bnd = np.zeros(sets.size, dtype=np.int64)
        comp = full & ~sets
        for i in range(m):
            inside = (sets >> i) & 1
            bnd += inside * ((adj[i] & comp) != 0)
        ratio = bnd * r / size
        k = int(np.argmin(ratio))
        wit = members[[i for i in range(m) if (int(sets[k]) >> i) & 1]]
        return IneqReport("isoperimetry", float(ratio[k]), 1.0, float(ratio[k]),
                          witness=wit.tolist(), details={"mode": mode, "subsets": int(sets.size)})
    if mode != "falsify":
        raise DomainError(f"unknown isoperimetry mode {mode!r}")
    if m < 3:
        raise DomainError("ball too small for an admissible subset")
    rng = rng_for(seed, 0)
    in_a = np.zeros(m, dtype=bool)
    in_a[rng.integers(m)] = True

    def value(sel):
        cnt = sel.sum()
        if cnt == 0 or 2 * cnt >= m:
            return np.inf
        bits = int(np.sum(1 << np.nonzero(~sel)[0].astype(np.int64)))
        bnd = sum(1 for i in np.nonzero(sel)[0] if adj[i] & bits)
        return bnd * r / cnt

    cur = value(in_a)
    best, best_set = cur, in_a.copy()
    temp0 = 1.0
    for step in range(samples):
        temp = temp0 * (1 - step / samples) + 1e-3
        prop = in_a.copy()
        prop[rng.integers(m)] ^= True
        val = value(prop)
        if np.isfinite(val) and (val <= cur or rng.random() < np.exp(-(val - cur) / temp)):
            in_a, cur = prop, val
            if cur < best:
                best, best_set = cur, in_a.copy()
    return IneqReport("isoperimetry", float(best), 1.0, float(best),
                      witness=members[best_set].tolist(), details={"mode": mode, "samples": samples})


def boundary_ratio(box: LatticeBox, B: Ball, A) -> float:
    """Re-evaluate ``|rel. boundary| * r / |A|`` for a witness set."""
    from .lattice import relative_boundary
    A = np.unique(np.asarray(A, dtype=np.int64))
    return relative_boundary(box, A, B).size * B.radius / A.size


# -- Poincare and Sobolev -----------------------------------------------------

def _pair_energy(env, members, u):
    """``sum_{x, y in B, x ~ y} omega(x, y) (u(x) - u(y))^2`` over ordered pairs."""
    box = env.box
    inside = np.zeros(box.n_vertices, dtype=bool)
    inside[members] = True
    keep = inside[box.tail] & inside[box.head]
    g = gradient(box, u)
    return 2.0 * float(np.sum(env.omega[keep] * g[keep] ** 2))


def _weighted_mean(u, members, w):
    w = np.ones(members.size) if w is None else w[members]
    return float(np.sum(u[members] * w) / np.sum(w))


def _check_pq(p, q, d):
    inv = lambda v: 0.0 if np.isinf(v) else 1.0 / v
    if not (p > 1 and q > 1):
        raise DomainError(f"weighted Poincare needs p, q in (1, inf], got p={p}, q={q}")
    if abs(inv(p) + inv(q) - 2.0 / d) > 1e-12:
        raise DomainError(f"weighted Poincare needs 1/p + 1/q = 2/d; got {inv(p) + inv(q):.12g} vs {2.0 / d:.12g}")


def centered_norm_sq(u, members, weight=None) -> float:
    """``|| u - (u)_w ||^2_{2,B,w}`` with the ``w``-weighted mean of ``u`` on ``B``."""
    u = np.asarray(u, dtype=float)
    a = _weighted_mean(u, members, weight)
    w = 1.0 if weight is None else weight[members]
    return float(np.sum((u[members] - a) ** 2 * w) / members.size)


def local_poincare(env, B: Ball, u, variant: str = "unweighted", p: float | None = None,
                   q: float | None = None, profile=None) -> IneqReport:
    """Local Poincare harness on the ball ``B = B(x0, n)``.

    ``variant`` is one of ``unweighted``, ``mu_weighted`` (needs ``p``, ``q``
    with ``1/p + 1/q = 2/d``), ``radial`` and ``radial_mu``.  For the radial
    variants ``profile`` is a non-increasing non-negative function on the
    normalized radius ``s = d(x0, x) / n`` in [0, 1]; the weight is
    ``eta = profile(s)`` inside the ball and 0 outside.
    """
    box = env.box
    d = box.d
    if d < 2:
        raise DomainError("Poincare harness needs d >= 2")
    u = np.asarray(u, dtype=float)
    n = B.radius
    if n < 1:
        raise DomainError("Poincare harness needs radius n >= 1")
    members = B.members
    vol = members.size
    mu, nu = np.asarray(env.mu), np.asarray(env.nu)
    details = {"variant": variant, "n": n, "volume": vol}

    if variant in ("unweighted", "mu_weighted"):
        energy = _pair_energy(env, members, u)
        if variant == "unweighted":
            lhs = centered_norm_sq(u, members)
            rhs = avg_norm(nu, members, d / 2) * n ** 2 / vol * energy
        else:
            _check_pq(p, q, d)
            lhs = centered_norm_sq(u, members, mu)
            rhs = avg_norm(mu, members, p) * avg_norm(nu, members, q) * n ** 2 / vol * energy
        details["energy"] = energy
        return IneqReport(f"poincare_{variant}", lhs, rhs, _ratio(lhs, rhs), details=details)

    if variant not in ("radial", "radial_mu"):
        raise DomainError(f"unknown Poincare variant {variant!r}")
    if profile is None:
        raise DomainError("radial variants need a profile function")
    dist = box.distance(B.center)
    s = dist / n
    eta = np.where(dist <= n, np.asarray([profile(v) for v in np.minimum(s, 1.0)], dtype=float), 0.0)
    if np.any(eta < 0):
        raise DomainError("profile must be non-negative")
    grid = np.linspace(0, 1, 65)
    vals = np.array([profile(v) for v in grid])
    if np.any(np.diff(vals) > 1e-15):
        raise DomainError("profile must be non-increasing")
    half = ball(box, B.center, n // 2).members
    phi0, phi_half = float(profile(0.0)), float(profile(0.5))
    if phi_half <= 0:
        raise DomainError("profile must be positive at half radius")
    m1 = 8 ** 2 * vol / half.size * phi0 / phi_half
    energy = dirichlet_form(env, u, weight="min_eta2", eta=eta)
    e2 = eta ** 2
    details.update(M1=m1, energy=energy)
    if variant == "radial":
        lhs = centered_norm_sq(u, members, e2)
        rhs = m1 * n ** 2 * avg_norm(nu, members, d / 2) * energy / vol
    else:
        _check_pq(p, q, d)
        m2 = m1 * avg_norm(mu, members, 1) / avg_norm(mu, half, 1)
        details["M2"] = m2
        lhs = centered_norm_sq(u, members, e2 * mu)
        rhs = m2 * n ** 2 * avg_norm(mu, members, p) * avg_norm(nu, members, q) * energy / vol
    return IneqReport(f"poincare_{variant}", lhs, rhs, _ratio(lhs, rhs), details=details)


def poincare_spectral_constant(env, B: Ball) -> float:
    """Best unweighted Poincare constant on ``B`` from the spectral gap.

    The sharp constant is ``1 / (||nu||_{d/2,B} n^2 lambda_2)`` where
    ``lambda_2`` is the smallest non-zero eigenvalue of the quadratic form of
    the ordered-pair energy on ``B`` (twice the induced weighted Laplacian).
    """
    box = env.box
    members = B.members
    pos = -np.ones(box.n_vertices, dtype=np.int64)
    pos[members] = np.arange(members.size)
    keep = (pos[box.tail] >= 0) & (pos[box.head] >= 0)
    i, j, w = pos[box.tail[keep]], pos[box.head[keep]], env.omega[keep]
    lap = np.zeros((members.size, members.size))
    np.add.at(lap, (i, j), -w)
    np.add.at(lap, (j, i), -w)
    np.add.at(lap, (i, i), w)
    np.add.at(lap, (j, j), w)
    ev = np.linalg.eigvalsh(2.0 * lap)
    lam2 = ev[1]
    return float(1.0 / (avg_norm(env.nu, members, box.d / 2) * B.radius ** 2 * lam2))


def sobolev(env, B: Ball, cutoff: Cutoff, u, q: float) -> IneqReport:
    """Weighted Sobolev harness; reports the implied constant."""
    box = env.box
    d = box.d
    r = rho(q, d)
    if not r > 0:
        raise DomainError(f"rho(q, d) = {r} is not positive")
    eta = np.asarray(cutoff.eta, dtype=float)
    members = B.members
    outside = np.ones(box.n_vertices, dtype=bool)
    outside[members] = False
    if np.any(eta[outside] != 0):
        raise DomainError("cutoff must be supported in the ball")
    if np.any((eta < 0) | (eta > 1)):
        raise DomainError("cutoff must take values in [0, 1]")
    rim = members[box.distance(B.center, members) == B.radius]
    if np.any(eta[rim] != 0):
        raise DomainError("cutoff must vanish on the boundary of the ball")
    u = np.asarray(u, dtype=float)
    vol = members.size
    lhs = avg_norm((eta * u) ** 2, members, r)
    energy = dirichlet_form(env, u, weight="eta2", eta=eta)
    grad_inf = cutoff.grad_sup
    rhs = vol ** (2 / d) * avg_norm(env.nu, members, q) * (
        energy / vol + grad_inf ** 2 * avg_norm(u ** 2, members, 1, env.mu))
    return IneqReport("sobolev", lhs, rhs, _ratio(lhs, rhs),
                      details={"rho": r, "energy": energy, "grad_sup": grad_inf})


# -- elementary real inequalities ---------------------------------------------

def _need(cond, msg):
    if not cond:
        raise DomainError(msg)


def _appendix_sides(id, a, b, alpha=None, beta=None, x=None, y=None):
    if id == "A1_i":
        _need(a >= 0 and b >= 0, "A1_i needs a, b >= 0")
        _need(alpha != 0 and beta != 0, "A1_i needs alpha, beta != 0")
        if min(alpha, beta, alpha - beta) < 0:
            _need(a > 0 and b > 0, "A1_i with a negative exponent needs a, b > 0")
        lhs = abs(a ** alpha - b ** alpha)
        rhs = abs(alpha / beta) * abs(a ** beta - b ** beta) * (a ** (alpha - beta) + b ** (alpha - beta))
        return lhs, rhs
    if id == "A1_ii_pow":
        _need(a >= 0 and b >= 0, "A1_ii_pow needs a, b >= 0")
        _need(alpha > 0.5, "A1_ii_pow needs alpha > 1/2")
        lhs = (a ** alpha - b ** alpha) ** 2
        rhs = abs(alpha ** 2 / (2 * alpha - 1)) * (a - b) * (a ** (2 * alpha - 1) - b ** (2 * alpha - 1))
        return lhs, rhs
    if id == "A1_ii_log":
        _need(a > 0 and b > 0, "A1_ii_log needs a, b > 0")
        return (np.log(a) - np.log(b)) ** 2, -(1 / a - 1 / b) * (a - b)
    if id == "A1_iii":
        _need(a >= 0 and b >= 0, "A1_iii needs a, b >= 0")
        _need(alpha >= 0 and beta >= 0, "A1_iii needs alpha, beta >= 0")
        lhs = (a ** alpha + b ** alpha) * abs(a ** beta - b ** beta)
        return lhs, 2 * abs(a ** (alpha + beta) - b ** (alpha + beta))
    if id == "A1_iv":
        _need(a >= 0 and b >= 0, "A1_iv needs a, b >= 0")
        _need(alpha >= 0.5, "A1_iv needs alpha >= 1/2")
        lhs = (a ** (2 * alpha - 1) + b ** (2 * alpha - 1)) * abs(a - b)
        return lhs, 4 * abs(a ** alpha - b ** alpha) * (a ** alpha + b ** alpha)
    if id == "A1_v":
        _need(alpha is not None and 0 < alpha < 0.5, "A1_v needs alpha in (0, 1/2)")
        _need(a > 0 and b > 0, "A1_v needs a, b > 0 (negative exponent 2 alpha - 1)")
        lhs = (a ** (2 * alpha - 1) - b ** (2 * alpha - 1)) * (a - b)
        return lhs, (2 * alpha - 1) / alpha ** 2 * (a ** alpha - b ** alpha) ** 2
    if id == "A2":
        _need(x is not None and y is not None and x > 0 and y > 0, "A2 needs x, y > 0")
        _need(b >= a >= 0, "A2 needs b >= a >= 0")
        _need(beta is not None and 0 < beta <= 1, "A2 needs beta in (0, 1]")
        lhs = (b ** 2 / y ** beta - a ** 2 / x ** beta) * (y - x)
        if a > 0:
            rhs = (a ** 2 / 2 * (y ** -beta - x ** -beta) * (y - x)
                   + 8 / beta * b ** 2 / a ** 2 * (b - a) ** 2 * y ** (1 - beta))
        else:
            rhs = b ** 2 * y ** (1 - beta)
        return lhs, rhs
    raise DomainError(f"unknown appendix estimate {id!r}; expected one of {APPENDIX_IDS}")


def appendix_estimate(id: str, slack: float = 1e-12, **inputs) -> IneqReport:
    """Evaluate one elementary inequality; ``violated`` uses a relative slack."""
    lhs, rhs = _appendix_sides(id, **inputs)
    tol = slack * max(1.0, abs(lhs), abs(rhs))
    return IneqReport(id, float(lhs), float(rhs), _ratio(lhs, rhs), bool(lhs > rhs + tol), tol,
                      witness=dict(inputs))


def sample_appendix_inputs(id: str, rng: np.random.Generator) -> dict:
    """Random admissible inputs for one estimate (log-uniform magnitudes)."""
    def mag():
        return float(10 ** rng.uniform(-3, 3))
    a, b = mag(), mag()
    if id == "A1_i":
        alpha = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-1, 0.5))
        beta = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-1, 0.5))
        return {"a": a, "b": b, "alpha": alpha, "beta": beta}
    if id == "A1_ii_pow":
        return {"a": a, "b": b, "alpha": float(rng.uniform(0.5, 4.0)) + 1e-6}
    if id == "A1_ii_log":
        return {"a": a, "b": b}
    if id == "A1_iii":
        return {"a": a, "b": b, "alpha": float(rng.uniform(0, 4)), "beta": float(rng.uniform(0, 4))}
    if id == "A1_iv":
        return {"a": a, "b": b, "alpha": float(rng.uniform(0.5, 4))}
    if id == "A1_v":
        return {"a": a, "b": b, "alpha": float(rng.uniform(1e-3, 0.5 - 1e-3))}
    if id == "A2":
        lo, hi = sorted((a, b))
        if rng.random() < 0.1:
            lo = 0.0
        return {"a": lo, "b": hi, "x": mag(), "y": mag(), "beta": float(rng.uniform(1e-3, 1.0))}
    raise DomainError(f"unknown appendix estimate {id!r}")


def appendix_soak(id: str, samples: int = 10_000, seed: int = 0, slack: float = 1e-12) -> dict:
    """Seeded random soak of one estimate; returns counts and the worst ratio seen."""
    rng = rng_for(seed, APPENDIX_IDS.index(id) if id in APPENDIX_IDS else 99)
    violations, worst, worst_in = 0, -np.inf, None
    for _ in range(samples):
        inputs = sample_appendix_inputs(id, rng)
        rep = appendix_estimate(id, slack=slack, **inputs)
        violations += int(rep.violated)
        margin = rep.lhs - rep.rhs
        if margin / max(1.0, abs(rep.lhs), abs(rep.rhs)) > worst:
            worst = margin / max(1.0, abs(rep.lhs), abs(rep.rhs))
            worst_in = inputs
    return {"id": id, "samples": samples, "violations": violations,
            "worst_relative_margin": float(worst), "worst_inputs": worst_in}
