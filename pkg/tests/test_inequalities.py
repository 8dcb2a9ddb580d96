from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conduct_lab.environment import constant_environment
from conduct_lab.errors import DomainError
from conduct_lab.inequalities import (APPENDIX_IDS, appendix_estimate, appendix_soak, boundary_ratio,
                                      centered_norm_sq, isoperimetry, local_poincare,
                                      poincare_spectral_constant, rho, sobolev, volume_regularity)
from conduct_lab.lattice import LatticeBox, ball, radial_cutoff, relative_boundary

from conftest import iid_env


def test_rho_examples():
    assert rho(1, 2) == 1
    assert rho(np.inf, 4) == 2
    assert rho(np.inf, 2) == np.inf
    for d in (2, 3, 4, 6):
        assert rho(d / 2, d) == pytest.approx(1, rel=1e-15)
    with pytest.raises(DomainError):
        rho(2, 1)
    qs = [1, 2, 5, 20, 1e6]
    assert all(a < b for a, b in zip([rho(q, 3) for q in qs], [rho(q, 3) for q in qs[1:]]))


def test_volume_regularity():
    box = LatticeBox(2, 6)
    rep1 = volume_regularity(box, 1)
    assert rep1.implied_constant == 5
    rep2 = volume_regularity(box, 2)
    assert rep2.details["per_radius"][2] == 3.25
    cs = [volume_regularity(box, r).implied_constant for r in range(1, 6)]
    assert all(a <= b for a, b in zip(cs, cs[1:]))
    with pytest.raises(DomainError):
        volume_regularity(box, 6)


def test_isoperimetry_small_ball():
    box = LatticeBox(2, 3)
    B = ball(box, (0, 0), 1)
    rep = isoperimetry(box, B, "exhaustive")
    # brute-force oracle independent of the bitmask search
    best = np.inf
    for k in range(1, 3):
        for A in combinations(B.members.tolist(), k):
            best = min(best, relative_boundary(box, list(A), B).size * 1 / len(A))
    assert rep.implied_constant == best == 0.5
    assert boundary_ratio(box, B, rep.witness) == rep.implied_constant
    assert boundary_ratio(box, B, [B.center]) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_falsify_never_beats_exhaustive(seed):
    box = LatticeBox(2, 4)
    B = ball(box, (0, 0), 2)
    exact = isoperimetry(box, B, "exhaustive").implied_constant
    rep = isoperimetry(box, B, "falsify", samples=3000, seed=seed)
    assert rep.implied_constant >= exact
    assert boundary_ratio(box, B, rep.witness) == pytest.approx(rep.implied_constant)


def test_isoperimetry_guard():
    box = LatticeBox(2, 5)
    with pytest.raises(DomainError, match="falsify"):
        isoperimetry(box, ball(box, (0, 0), 3), "exhaustive")


def test_poincare_constant_and_centering():
    env = iid_env(2, 5, seed=3)
    B = ball(env.box, (0, 0), 3)
    rep = local_poincare(env, B, np.full(env.box.n_vertices, 2.0))
    assert rep.lhs == 0
    u = np.random.default_rng(0).normal(size=env.box.n_vertices)
    w = env.mu
    lhs = centered_norm_sq(u, B.members, w)
    grid = np.linspace(-3, 3, 20001)
    brute = min(np.sum((u[B.members] - a) ** 2 * w[B.members]) / B.size for a in grid)
    assert lhs <= brute + 1e-12
    assert lhs == pytest.approx(brute, rel=1e-6)


def test_poincare_spectral_oracle():
    env = constant_environment(LatticeBox(2, 5))
    B = ball(env.box, (0, 0), 3)
    u = env.box.coords[:, 0].astype(float)
    rep = local_poincare(env, B, u)
    c_spec = poincare_spectral_constant(env, B)
    assert np.isfinite(rep.implied_constant)
    assert rep.implied_constant <= c_spec * (1 + 1e-10)
    assert rep.implied_constant >= c_spec / 4
    # the spectral constant is attained by the second eigenvector's worst case
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.normal(size=env.box.n_vertices)
        assert local_poincare(env, B, v).implied_constant <= c_spec * (1 + 1e-10)


def test_weighted_matches_unweighted_for_unit_env():
    env = constant_environment(LatticeBox(2, 5))
    B = ball(env.box, (0, 0), 3)
    u = np.random.default_rng(2).normal(size=env.box.n_vertices)
    a = local_poincare(env, B, u).implied_constant
    b = local_poincare(env, B, u, "mu_weighted", p=2, q=2).implied_constant
    assert a == pytest.approx(b, rel=1e-12)
    with pytest.raises(DomainError):
        local_poincare(env, B, u, "mu_weighted", p=2, q=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50),
       st.sampled_from(["unweighted", "mu_weighted", "radial", "radial_mu"]))
def test_poincare_shift_invariance(seed, c, variant):
    env = iid_env(2, 4, seed=seed % 97)
    B = ball(env.box, (0, 0), 3)
    u = np.random.default_rng(seed).normal(size=env.box.n_vertices)
    kw = {"p": 2, "q": 2} if "mu" in variant else {}
    if variant.startswith("radial"):
        kw["profile"] = lambda s: 1.0 - 0.5 * s
    a = local_poincare(env, B, u, variant, **kw)
    b = local_poincare(env, B, u + c, variant, **kw)
    assert b.lhs == pytest.approx(a.lhs, rel=1e-7, abs=1e-9)
    assert b.rhs == pytest.approx(a.rhs, rel=1e-7, abs=1e-9)


def test_radial_constants():
    env = iid_env(2, 6, seed=4)
    B = ball(env.box, (0, 0), 4)
    u = np.random.default_rng(3).normal(size=env.box.n_vertices)
    rep = local_poincare(env, B, u, "radial_mu", p=2, q=2, profile=lambda s: 1 - s / 2)
    half = ball(env.box, (0, 0), 2)
    m1 = 64 * B.size / half.size * 1.0 / 0.75
    assert rep.details["M1"] == pytest.approx(m1, rel=1e-14)
    mu = env.mu
    assert rep.details["M2"] == pytest.approx(m1 * mu[B.members].mean() / mu[half.members].mean(), rel=1e-12)
    with pytest.raises(DomainError):
        local_poincare(env, B, u, "radial", profile=lambda s: s)


def test_sobolev_examples():
    env = constant_environment(LatticeBox(2, 6))
    B = ball(env.box, (0, 0), 4)
    cut = radial_cutoff(env.box, (0, 0), 1, 4)
    rep = sobolev(env, B, cut, np.zeros(env.box.n_vertices), np.inf)
    assert rep.lhs == 0 and rep.details["energy"] == 0
    u = np.random.default_rng(0).uniform(1, 2, env.box.n_vertices)
    # q = inf with d = 2 gives rho = inf; use a finite q for the homogeneity check
    a = sobolev(env, B, cut, u, 4)
    b = sobolev(env, B, cut, 2 * u, 4)
    assert b.lhs == pytest.approx(4 * a.lhs, rel=1e-13)
    assert b.rhs == pytest.approx(4 * a.rhs, rel=1e-13)


@pytest.mark.parametrize("seed", [0, 5])
def test_sobolev_stable_constant(seed):
    env = constant_environment(LatticeBox(2, 6))
    B = ball(env.box, (0, 0), 5)
    cut = radial_cutoff(env.box, (0, 0), 2, 5)
    rng = np.random.default_rng(seed)
    cs = np.array([sobolev(env, B, cut, rng.uniform(1, 2, env.box.n_vertices), np.inf).implied_constant
                   for _ in range(50)])
    med = np.median(cs)
    assert np.all(np.isfinite(cs))
    assert np.all(np.abs(cs - med) <= 0.2 * med)


def test_sobolev_bad_cutoff():
    env = constant_environment(LatticeBox(2, 6))
    B = ball(env.box, (0, 0), 3)
    with pytest.raises(DomainError):
        sobolev(env, B, radial_cutoff(env.box, (0, 0), 1, 5), np.ones(env.box.n_vertices), 4)


def test_appendix_examples():
    r = appendix_estimate("A1_i", a=2.0, b=2.0, alpha=1.5, beta=0.5)
    assert r.lhs == 0 and r.rhs == 0 and not r.violated
    r = appendix_estimate("A1_ii_log", a=2.0, b=1.0)
    assert r.lhs == pytest.approx(np.log(2) ** 2, rel=1e-15)
    assert r.rhs == pytest.approx(0.5, rel=1e-15)
    assert not r.violated
    r = appendix_estimate("A2", a=0.0, b=1.5, x=2.0, y=3.0, beta=0.5)
    assert r.lhs == pytest.approx(1.5 ** 2 / 3 ** 0.5 * (3 - 2))
    assert r.rhs == pytest.approx(1.5 ** 2 * 3 ** 0.5)
    assert not r.violated
    with pytest.raises(DomainError, match="alpha > 1/2"):
        appendix_estimate("A1_ii_pow", a=1.0, b=2.0, alpha=0.3)
    with pytest.raises(DomainError, match="b >= a"):
        appendix_estimate("A2", a=2.0, b=1.0, x=1.0, y=1.0, beta=0.5)


@pytest.mark.parametrize("id", APPENDIX_IDS)
def test_appendix_soak(id):
    out = appendix_soak(id, samples=10_000, seed=0)
    assert out["violations"] == 0
    assert out["samples"] == 10_000


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(0.51, 4.0))
def test_appendix_power_property(a, b, alpha):
    assert not appendix_estimate("A1_ii_pow", a=a, b=b, alpha=alpha).violated
    assert not appendix_estimate("A1_iv", a=a, b=b, alpha=alpha).violated
