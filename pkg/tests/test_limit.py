import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conduct_lab.environment import GeneratorSpec, constant_environment, generate
from conduct_lab.errors import DomainError
from conduct_lab.lattice import LatticeBox
from conduct_lab.limit import (GaussianKernel, a_spatial_drift, control_decay_exponent, cube_integral,
                               edge_kernel_values, estimate_inequality_6, exact_a, gaussian_kernel,
                               gbm_closed_form, gbm_quadrature, green_half_extent, green_lclt,
                               heat_kernel_moment, lattice_point, lclt_error, lclt_grid,
                               near_diagonal_constants, path_family, path_lower_bound,
                               required_half_extent, sandwich_check, trap_counterexample)
from conduct_lab.operators import CSRW, VSRW

from conftest import UNIFORM_1_2, iid_env


def test_gaussian_value():
    assert gaussian_kernel(np.eye(2), 1.0, [0, 0]) == pytest.approx(1 / (2 * np.pi), rel=1e-15)
    assert GaussianKernel(np.eye(3))(2.0, [0, 0, 0]) == pytest.approx((4 * np.pi) ** -1.5, rel=1e-14)
    with pytest.raises(DomainError):
        gaussian_kernel(np.array([[1, 2], [2, 1]]), 1.0, [0, 0])
    with pytest.raises(DomainError):
        gaussian_kernel(np.eye(2), 0.0, [0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31), st.floats(0.05, 20))
def test_gaussian_scaling(d, seed, t):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    s = A @ A.T + 0.5 * np.eye(d)
    x = rng.normal(size=d)
    lhs = gaussian_kernel(s, t, x)
    rhs = t ** (-d / 2) * gaussian_kernel(s, 1.0, x / np.sqrt(t))
    assert lhs == pytest.approx(rhs, rel=1e-14)
    assert lhs > 0


def test_gaussian_mass():
    h = 16 / 400
    axis = -8 + h * (np.arange(400) + 0.5)
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    assert np.sum(gaussian_kernel(np.eye(2), 1.0, pts)) * h * h == pytest.approx(1.0, abs=1e-6)


def test_cube_integral_paths_agree():
    s = np.array([[0.6, 0.0], [0.0, 0.4]])
    x = np.array([0.3, -0.2])
    r = np.array([[0.6, 1e-9], [1e-9, 0.4]])
    assert cube_integral(s, 1.5, x, 0.1) == pytest.approx(cube_integral(r, 1.5, x, 0.1), rel=1e-8)


def test_grid_and_margins():
    times, xs = lclt_grid(2, 1.0, 2.0, 1.0)
    assert times.size == 32 and xs.shape == (49, 2)
    assert np.all(np.linalg.norm(xs, axis=1) <= 1 + 1e-12)
    assert required_half_extent(8, 1.0, 2.0) == int(np.ceil(8 * 1.1 + 4 * np.sqrt(128)))
    assert lattice_point(3, [0.5, -0.5]).tolist() == [1, -2]
    with pytest.raises(DomainError):
        lclt_grid(2, 2.0, 1.0, 1.0)


def test_lclt_unit_origin():
    n = 16
    need = required_half_extent(n, 0.0, 1.0)
    env = constant_environment(LatticeBox(2, need))
    s = 0.5 * np.eye(2)
    rep = lclt_error(env, n, [1.0], [[0.0, 0.0]], s)
    a = 0.25
    assert rep.a == pytest.approx(a, rel=1e-14)
    k1 = gaussian_kernel(s, 1.0, [0, 0])
    assert rep.sup_error < 0.05 * k1 * a
    assert rep.split_residual < 1e-10


def test_lclt_box_check():
    env = constant_environment(LatticeBox(2, 8))
    with pytest.raises(DomainError, match="need L >= 109"):
        lclt_error(env, 16, [1.0, 2.0], [[1.0, 0.0]], 0.5 * np.eye(2))


def test_lclt_split_identity():
    env = iid_env(2, 40, seed=2)
    times, xs = lclt_grid(2, 1.0, 2.0, 1.0, n_t=4)
    rep = lclt_error(env, 4, times, xs, 0.4 * np.eye(2))
    assert rep.split_residual < 1e-10
    assert rep.sup_error >= 0
    assert len(rep.rows()) == times.size * xs.shape[0]
    assert rep.summary()["n_x"] == xs.shape[0]


def test_a_estimator():
    spec = GeneratorSpec(kind="iid", law=UNIFORM_1_2, seed=3)
    assert exact_a(spec, 2) == pytest.approx(1 / 6)
    assert exact_a(GeneratorSpec(), 3) == pytest.approx(1 / 6)
    assert a_spatial_drift(spec, 2, 40) < 0.01


def test_gbm_cross_check():
    for d in (3, 4, 5):
        for s in (np.eye(d), 0.3 * np.eye(d)):
            x = np.arange(1, d + 1) / d
            assert gbm_quadrature(s, x) == pytest.approx(gbm_closed_form(s, x), rel=1e-8)
    # k_t belongs to the generator (1/2) div S grad, so the d = 3 kernel is 1 / (2 pi |x|)
    assert gbm_closed_form(np.eye(3), [1, 0, 0]) == pytest.approx(1 / (2 * np.pi), rel=1e-14)
    # unit CSRW: S = I/3 and a = 1/6 give the simple random walk constant 1 / (4 pi)
    assert gbm_closed_form(np.eye(3) / 3, [1, 0, 0]) / 6 == pytest.approx(1 / (4 * np.pi), rel=1e-14)
    with pytest.raises(DomainError):
        gbm_closed_form(np.eye(3), [0, 0, 0])
    with pytest.raises(DomainError):
        gbm_quadrature(np.eye(2), [1, 0])


def test_green_lclt_small_n():
    x = [1.0, 0.0, 0.0]
    errs = []
    for n in (2, 4):
        env = constant_environment(LatticeBox(3, green_half_extent(n, x), "absorbing"))
        rep = green_lclt(env, n, x, np.eye(3) / 3)
        errs.append(rep.error)
        assert rep.a == pytest.approx(1 / 6)
        assert rep.gbm == pytest.approx(rep.gbm_quadrature, rel=1e-8)
    assert errs[1] < errs[0]
    env = constant_environment(LatticeBox(3, 4, "absorbing"))
    with pytest.raises(DomainError):
        green_lclt(env, 2, [0, 0, 0], np.eye(3) / 3)
    with pytest.raises(DomainError):
        green_lclt(constant_environment(LatticeBox(2, 4, "absorbing")), 2, [1, 0], np.eye(2) / 2)


def test_trap_mechanism():
    rep = trap_counterexample(0.75, 0.75, d=2, k=6, R=3)
    assert 2 ** ((rep.alpha + rep.beta) * rep.k) >= 8
    assert rep.return_probability >= 0.2
    assert rep.return_probability_ablated < 0.05
    assert abs(rep.control_exponent - rep.control_target) <= 0.2 * abs(rep.control_target)
    with pytest.raises(DomainError):
        trap_counterexample(0.25, 0.25, d=2)


def test_trap_from_generated_env():
    spec = GeneratorSpec(kind="trap", alpha=1.0, beta=1.0, k0=2, seed=1)
    env = generate(spec, LatticeBox(2, 10))
    rep = trap_counterexample(1.0, 1.0, k=2, env=env, control=False)
    assert rep.return_probability > rep.return_probability_ablated
    with pytest.raises(DomainError, match="trap"):
        trap_counterexample(1.0, 1.0, k=2, env=constant_environment(LatticeBox(2, 4)), control=False)


def test_control_exponent():
    slope, target = control_decay_exponent(2, 9.0)
    assert target == -1
    assert abs(slope - target) <= 0.2


def test_moment_unit_env_exact():
    box = LatticeBox(2, 2)
    spec = GeneratorSpec()
    vals, _ = edge_kernel_values(constant_environment(box), CSRW, 1.0)
    est = heat_kernel_moment(spec, box, CSRW, 1.0, 2.0, n_envs=4)
    assert est.mean == pytest.approx(vals[int(box.neighbor_edges[box.index((0, 0)), 0])] ** -2.0, rel=1e-12)
    assert est.stderr == 0
    v = heat_kernel_moment(spec, box, VSRW, 1.0, 1.0, n_envs=2)
    assert np.all(v.values == v.values[0])


@pytest.mark.parametrize("seed", range(5))
def test_sandwich_min_env(seed):
    spec = GeneratorSpec(kind="vertex_combine", law={"name": "lognormal", "sigma": 1.0}, combine="min", seed=seed)
    env = generate(spec, LatticeBox(2, 2))
    for t in (0.5, 1.0, 2.0):
        chk = sandwich_check(env, t)
        assert chk.lower_violations == 0 and chk.upper_violations == 0


def test_path_family_disjoint():
    box = LatticeBox(3, 4)
    x = box.index((0, 0, 0))
    paths = path_family(box, x, 0)
    assert len(paths) == 6
    edges = [frozenset(p) for path in paths for p in zip(path[:-1], path[1:])]
    assert len(edges) == len(set(edges))
    for path in paths:
        assert path[0] == x and path[-1] == box.index((1, 0, 0))
        for a, b in zip(path[:-1], path[1:]):
            assert b in box.neighbors[a]


@pytest.mark.parametrize("seed", range(3))
def test_low_est_path(seed):
    env = iid_env(2, 2, seed=seed, law={"name": "uniform", "low": 0.01, "high": 1.0})
    rep = estimate_inequality_6("low_est_path", env=env, t=1.0)
    assert rep.details["violations"] == 0
    assert rep.lhs >= 1.0
    x = env.box.index((0, 0))
    assert path_lower_bound(env, 1.0, x, 0) > 0


def test_est_om():
    spec = GeneratorSpec(kind="vertex_combine", law={"name": "lognormal", "sigma": 1.5}, combine="min", seed=3)
    env = generate(spec, LatticeBox(2, 3))
    for n in (1, 3, 5):
        rep = estimate_inequality_6("est_om", env=env, n=n)
        assert rep.details["violations"] == 0
    assert estimate_inequality_6("est_om", env=env, n=1).lhs <= 1 / 4 + 1e-15
    with pytest.raises(DomainError):
        estimate_inequality_6("est_om", env=env, n=2)
    with pytest.raises(DomainError):
        estimate_inequality_6("est_om", env=iid_env(2, 2), n=3)


def test_tail_probes():
    law = {"name": "power", "exponent": 1.0}
    lo = estimate_inequality_6("momX", law=law, beta=0.6, n_samples=400_000, seed=1)
    hi = estimate_inequality_6("momX", law=law, beta=0.8, n_samples=400_000, seed=1)
    assert lo.details["finite"] and not hi.details["finite"]
    assert not lo.violated
    z_lo = estimate_inequality_6("momZ", law=law, beta=1.5, N=2, n_samples=400_000, seed=2)
    z_hi = estimate_inequality_6("momZ", law=law, beta=2.5, N=2, n_samples=400_000, seed=2)
    assert z_lo.details["finite"] and not z_hi.details["finite"]
    with pytest.raises(DomainError):
        estimate_inequality_6("momQ", beta=1)


def test_near_diagonal_constants_stable():
    env = iid_env(2, 36, seed=5)
    out = near_diagonal_constants(env, [4, 8, 16, 32])
    lo, hi = np.array(out["C12"]), np.array(out["C13"])
    assert np.all(lo > 0) and np.all(hi >= lo)
    assert hi.max() / hi.min() < 2 and lo.max() / lo.min() < 2


def test_lclt_empty_cube():
    # n delta < 1/2: a cube can miss every lattice point, J is then minus the Gaussian mass
    env = constant_environment(LatticeBox(2, required_half_extent(2, 1.0, 1.0)))
    rep = lclt_error(env, 2, [1.0], [[0.25, 0.25]], 0.5 * np.eye(2))
    assert rep.J[0, 0] < 0
    assert rep.split_residual < 1e-10
