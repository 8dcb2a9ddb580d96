import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from conduct_lab.environment import GeneratorSpec, constant_environment
from conduct_lab.errors import DomainError
from conduct_lab.lattice import LatticeBox
from conduct_lab.operators import CSRW, VSRW, heat_kernel, time_changed
from conduct_lab.walker import (covariance_box, cube_occupancy, estimate_covariance, homogenized_covariance,
                                simulate, simulate_endpoints)

from conftest import UNIFORM_1_2, iid_env, origin


def test_zero_horizon():
    env = iid_env(2, 3, seed=0)
    p = simulate(env, CSRW, (1, 1), 0.0, seed=3)
    assert p.n_jumps == 0 and p.final == env.box.index((1, 1))
    with pytest.raises(DomainError):
        simulate(env, CSRW, 0, -1.0, seed=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["CSRW", "VSRW"]))
def test_path_invariants(seed, kind):
    env = iid_env(2, 3, seed=seed % 100)
    p = simulate(env, kind, 0, 5.0, seed)
    box = env.box
    assert np.all(np.diff(p.times) > 0)
    for a, b in zip(p.positions, p.positions[1:]):
        assert b in box.neighbors[a]
    assert np.all(np.abs(np.diff(p.displacement, axis=0)).sum(axis=1) == 1)
    again = simulate(env, kind, 0, 5.0, seed)
    assert np.array_equal(again.times, p.times) and np.array_equal(again.positions, p.positions)


def test_time_change_clock():
    env = iid_env(2, 4, seed=1)
    pi = 0.5 + np.random.default_rng(2).random(env.box.n_vertices)
    T = 40.0
    v = simulate(env, VSRW, 0, 1e3, seed=7)
    one = simulate(env, time_changed(np.ones(env.box.n_vertices)), 0, 1e3, seed=7)
    assert np.array_equal(one.positions, v.positions)
    assert np.allclose(one.times, v.times, rtol=1e-15, atol=0)
    tc = simulate(env, time_changed(pi), 0, T, seed=7)
    # A_t = int_0^t pi(X^V_s) ds evaluated at the VSRW jump times gives the time-changed clock
    A = np.concatenate([[0.0], np.cumsum(np.diff(v.times) * pi[v.positions[:-1]])])
    k = tc.n_jumps
    assert np.array_equal(tc.positions, v.positions[: k + 1])
    assert np.allclose(tc.times, A[: k + 1], rtol=1e-12, atol=0)
    assert A[k + 1] > T


def test_first_jump_law():
    # from the centre of an absorbing L=1 box the first jump lands on the shell and stops
    env = iid_env(2, 1, seed=4, boundary="absorbing")
    c = origin(env.box)
    n = 100_000
    ep = simulate_endpoints(env, CSRW, c, 60.0, n, seed=5)
    nbrs = env.box.neighbors[c]
    p = np.array([env.conductance(c, y) for y in nbrs]) / env.mu[c]
    counts = np.array([(ep.positions == y).sum() for y in nbrs])
    assert counts.sum() == n
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sd)
    assert ep.absorbed == 1.0


@pytest.mark.parametrize("kind", ["CSRW", "VSRW"])
def test_exact_law_chi_squared(kind):
    env = iid_env(2, 2, seed=6)
    n = 100_000
    ep = simulate_endpoints(env, kind, 0, 2.0, n, seed=8)
    P = heat_kernel(env, kind, 2.0, 0).P
    obs = np.bincount(ep.positions, minlength=P.size)
    keep = n * P >= 5
    stat = np.sum((obs[keep] - n * P[keep]) ** 2 / (n * P[keep]))
    assert stat <= chi2.ppf(0.999, keep.sum() - 1)


def test_endpoints_thread_independent():
    env = iid_env(2, 3, seed=9)
    a = simulate_endpoints(env, VSRW, 0, 3.0, 20_000, seed=1, threads=1)
    b = simulate_endpoints(env, VSRW, 0, 3.0, 20_000, seed=1, threads=3)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.displacement, b.displacement)


def test_unit_csrw_covariance():
    T = 20.0
    env = constant_environment(covariance_box(2, T))
    est = estimate_covariance(env, CSRW, T, 40_000, seed=2)
    assert np.allclose(est.sigma2, est.sigma2.T)
    assert np.all(np.abs(est.sigma2 - 0.5 * np.eye(2)) <= 3 * est.stderr + 1e-15)
    assert est.left_domain == 0.0


def test_unit_vsrw_matches_kernel_moment():
    T = 5.0
    box = covariance_box(2, T, max_rate=4.0)
    env = constant_environment(box)
    P = heat_kernel(env, VSRW, T, origin(box)).P
    y = box.coords.astype(float)
    exact = (y * P[:, None]).T @ y / T
    assert np.allclose(exact, 2 * np.eye(2), atol=1e-8)
    est = estimate_covariance(env, VSRW, T, 40_000, seed=3)
    assert np.all(np.abs(est.sigma2 - exact) <= 3 * est.stderr + 1e-12)


def test_time_change_by_mu_matches_csrw():
    T = 6.0
    env = iid_env(2, 16, seed=10)
    a = estimate_covariance(env, CSRW, T, 30_000, seed=4)
    b = estimate_covariance(env, time_changed(env.mu), T, 30_000, seed=4)
    # same draws, same process: identical paths
    assert np.allclose(a.sigma2, b.sigma2, rtol=1e-12)
    c = estimate_covariance(env, time_changed(env.mu), T, 30_000, seed=5)
    se = np.sqrt(a.stderr ** 2 + c.stderr ** 2)
    assert np.all(np.abs(a.sigma2 - c.sigma2) <= 4 * se)


def test_covariance_from_spec():
    spec = GeneratorSpec(kind="iid", law=UNIFORM_1_2, seed=3)
    box = LatticeBox(2, 12)
    est = estimate_covariance(spec, CSRW, 4.0, 4000, n_envs=3, box=box, seed=1)
    assert est.n_envs == 3 and est.n_samples == 12_000
    assert np.all(np.diag(est.sigma2) > 0)
    with pytest.raises(DomainError):
        estimate_covariance(spec, CSRW, 4.0, 1, box=box)


def test_homogenized_unit():
    env = constant_environment(LatticeBox(2, 4))
    assert np.allclose(homogenized_covariance(env, CSRW), 0.5 * np.eye(2), atol=1e-12)
    assert np.allclose(homogenized_covariance(env, VSRW), 2 * np.eye(2), atol=1e-12)


def test_homogenized_one_dimension_harmonic_mean():
    # in d = 1 the effective VSRW conductance is the harmonic mean
    env = iid_env(1, 20, seed=11)
    hm = 1 / np.mean(1 / env.omega)
    assert homogenized_covariance(env, VSRW)[0, 0] == pytest.approx(2 * hm, rel=1e-10)


def test_cube_occupancy():
    env = iid_env(2, 8, seed=12)
    full = cube_occupancy(env, CSRW, 1, 2.0, (0, 0), 8, 2000, seed=1)
    assert full.mc == 1.0 and full.exact == pytest.approx(1.0, abs=1e-9)
    zero = cube_occupancy(env, CSRW, 2, 0.0, (0, 0), 0.25, 500, seed=1)
    assert zero.mc == 1.0 and zero.exact == 1.0
    occ = cube_occupancy(env, CSRW, 2, 1.0, (0.5, 0), 0.5, 20_000, seed=2)
    assert abs(occ.mc - occ.exact) <= 4 * occ.stderr
    with pytest.raises(DomainError):
        cube_occupancy(env, CSRW, 4, 1.0, (2, 0), 0.5, 10)
