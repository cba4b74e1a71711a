import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dampopt.checks import random_system
from dampopt.errors import StartFailure
from dampopt.model import SecondOrderSystem, modal_transform
from dampopt.optimize import (GuardedObjective, adaptive_rbm_optimize, guarded_objective,
                              initial_simplex, nelder_mead_box, optimize_exact,
                              optimize_reduced, rbm_optimize)
from dampopt.rbm import ErrorEstimator, FactorCache, ReducedBasis, initial_bases, orth

from conftest import exact_squared

TOL = 1e-4


# --- Nelder-Mead ---------------------------------------------------------------


def test_scalar_interior_minimum():
    res = nelder_mead_box(lambda g: (g[0] - 3.3) ** 2, [1.0], [(0.0, 10.0)], tol=TOL)
    assert res.converged and abs(res.x[0] - 3.3) <= TOL


def test_two_dimensional_minimum():
    f = lambda g: (g[0] - 2) ** 2 + (g[1] - 3) ** 2
    res = nelder_mead_box(f, [5.0, 5.0], [(0, 10), (0, 10)], tol=TOL)
    assert res.converged
    np.testing.assert_allclose(res.x, [2, 3], atol=TOL)


def test_minimum_outside_box_lands_on_bound():
    res = nelder_mead_box(lambda g: (g[0] + 1) ** 2, [2.0], [(0.0, 4.0)], tol=TOL)
    assert res.converged and res.x[0] == 0.0


def test_all_infinite_start_fails():
    with pytest.raises(StartFailure):
        nelder_mead_box(lambda g: np.inf, [1.0, 1.0], [(0, 2), (0, 2)])


def test_infinite_values_rank_last():
    f = lambda g: np.inf if g[0] > 5 else (g[0] - 4) ** 2
    res = nelder_mead_box(f, [4.5], [(0.0, 10.0)], tol=TOL)
    assert abs(res.x[0] - 4) <= TOL


def test_argument_checks():
    with pytest.raises(ValueError):
        nelder_mead_box(lambda g: 0.0, [11.0], [(0.0, 10.0)])
    with pytest.raises(ValueError):
        nelder_mead_box(lambda g: 0.0, [1.0], [(0.0, 10.0)], tol=0)


def test_budget_exhaustion_is_reported():
    res = nelder_mead_box(lambda g: (g[0] - 3.3) ** 2, [1.0], [(0.0, 10.0)], max_evals=5)
    assert not res.converged and res.nfev <= 7


def test_initial_simplex_steps():
    S = initial_simplex(np.array([1.0, 99.0]), np.array([[0.0, 10.0], [0.0, 100.0]]))
    np.testing.assert_allclose(S, [[1, 99], [2, 99], [1, 94]])


@settings(max_examples=30, deadline=None)
@given(a=st.lists(st.floats(-20, 20), min_size=2, max_size=2),
       x0=st.lists(st.floats(0, 10), min_size=2, max_size=2))
def test_every_evaluation_is_feasible_and_deterministic(a, x0):
    seen = []

    def f(g):
        seen.append(g.copy())
        return (g[0] - a[0]) ** 2 + 3 * (g[1] - a[1]) ** 2 + g[0] * g[1] / 10

    b = [(0.0, 10.0), (0.0, 10.0)]
    r1 = nelder_mead_box(f, x0, b, tol=1e-6)
    pts = np.array(seen)
    assert np.all(pts >= 0.0) and np.all(pts <= 10.0)
    r2 = nelder_mead_box(f, x0, b, tol=1e-6)
    np.testing.assert_array_equal(r1.x, r2.x)
    assert r1.nfev == r2.nfev


# --- toy systems ---------------------------------------------------------------


def one_mode():
    s = SecondOrderSystem([[1.0]], [[1.0]], 0.01, [[1.0]], [[1.0]], [[1.0]], [(0.1, 5.0)])
    return modal_transform(s)


@pytest.fixture(scope="module")
def modal20():
    rng = np.random.default_rng(11)
    return modal_transform(random_system(rng, 20, ell=2, m=2, p=2, gain_range=(0.05, 5.0),
                                         alpha=0.01))


def grid(bounds, k):
    a = np.linspace(*bounds[0], k)
    b = np.linspace(*bounds[1], k)
    return np.array([(x, y) for x in a for y in b])


def test_exact_one_mode_matches_grid_oracle():
    mr = one_mode()
    gs = np.arange(0.1, 5.0 + 1e-12, 1e-3)
    best = gs[np.argmin([exact_squared(mr, [g]) for g in gs])]
    out = optimize_exact(mr, g0=[1.0], opt_tol=TOL)
    assert out.converged and abs(out.g_opt[0] - best) <= 1e-3
    assert out.J_opt.source == "exact"


def test_adaptive_one_mode_matches_grid_oracle():
    mr = one_mode()
    gs = np.arange(0.1, 5.0 + 1e-12, 1e-3)
    best = gs[np.argmin([exact_squared(mr, [g]) for g in gs])]
    D = np.linspace(0.1, 5.0, 6)[:, None]
    out = adaptive_rbm_optimize(mr, g0=[1.0], D_test=D, opt_tol=TOL)
    assert out.converged and abs(out.g_opt[0] - best) <= 1e-3


def test_exact_interior_optimum_matches_grid(modal20):
    out = optimize_exact(modal20, g0=[1.0, 1.0], opt_tol=1e-6)
    assert out.converged
    gs = grid(modal20.bounds, 41)
    assert out.J_opt.squared <= min(exact_squared(modal20, g) for g in gs) * (1 + 1e-9)
    lo, hi = modal20.bounds[:, 0], modal20.bounds[:, 1]
    assert np.all(out.g_opt >= lo) and np.all(out.g_opt <= hi)


def test_guard_full_basis_is_exact(modal20):
    rb = ReducedBasis(np.eye(20), np.eye(20))
    g = np.array([0.7, 2.0])
    res = guarded_objective(modal20, rb, g, 1e-3)
    assert res.conv and res.value == pytest.approx(exact_squared(modal20, g), rel=1e-8)


def test_guard_fires_on_poor_basis(modal20):
    rng = np.random.default_rng(0)
    V1 = orth(rng.standard_normal((20, 1)))
    rb = ReducedBasis(V1, orth(rng.standard_normal((20, 4)), V1.copy()))
    res = guarded_objective(modal20, rb, [1.0, 1.0], 1e-3)
    assert not res.conv and res.value == np.inf and res.delta > 1e-3


def test_guard_records_first_blocking_parameter(modal20):
    rng = np.random.default_rng(0)
    V1 = orth(rng.standard_normal((20, 1)))
    obj = GuardedObjective(ErrorEstimator(modal20, V1, orth(np.eye(20)[:, :3], V1.copy())), 1e-3)
    obj([1.0, 1.0])
    obj([2.0, 2.0])
    np.testing.assert_array_equal(obj.blocking, [1.0, 1.0])


def test_adaptive_without_guard_equals_reduced_optimum(modal20):
    D = grid(modal20.bounds, 4)
    g0 = np.array([1.0, 1.0])
    out = adaptive_rbm_optimize(modal20, g0=g0, D_test=D, tol_f=np.inf, opt_tol=1e-6)
    assert out.restarts == 0 and out.converged
    V1, V1err = initial_bases(FactorCache(modal20), g0, out.basis.rr_params[0], 1e-2)
    ref = optimize_reduced(modal20, ReducedBasis(V1, V1err), g0, opt_tol=1e-6)
    np.testing.assert_allclose(out.g_opt, ref.g_opt, rtol=1e-6)
    assert out.J_opt.squared == pytest.approx(ref.J_opt.squared, rel=1e-9)


@pytest.fixture(scope="module")
def adaptive20(modal20):
    D = grid(modal20.bounds, 6)
    out = adaptive_rbm_optimize(modal20, g0=[1.0, 1.0], D_test=D, tol_f=1e-3, opt_tol=1e-6)
    exact = optimize_exact(modal20, g0=[1.0, 1.0], opt_tol=1e-6)
    return out, exact


def test_adaptive_agrees_with_exact(adaptive20):
    out, exact = adaptive20
    assert out.converged
    np.testing.assert_allclose(out.g_opt, exact.g_opt, rtol=1e-2)
    assert out.J_opt.value == pytest.approx(exact.J_opt.value, rel=1e-3)


def test_accepted_points_are_feasible_and_sound(modal20, adaptive20):
    out, _ = adaptive20
    acc = np.array([g for g, _ in out.accepted])
    lo, hi = modal20.bounds[:, 0], modal20.bounds[:, 1]
    assert np.all(acc >= lo) and np.all(acc <= hi)
    for g, value in out.accepted[:: max(1, len(out.accepted) // 10)]:
        J2 = exact_squared(modal20, g)
        assert abs(value - J2) <= 50e-3 * J2


def test_rbm_full_checkpoint_equals_exact(modal20):
    D = grid(modal20.bounds, 3)
    out = rbm_optimize(modal20, D, g0=[1.0, 1.0], opt_tol=1e-8,
                       basis=ReducedBasis(np.eye(20), np.eye(20), [D[0]], [D[-1]]))
    exact = optimize_exact(modal20, g0=[1.0, 1.0], opt_tol=1e-8)
    np.testing.assert_allclose(out.g_opt, exact.g_opt, rtol=1e-6)
    assert set(out.wall_times) == {"offline", "online", "total"}
    assert out.basis_r == 20


def test_adaptive_argument_checks(modal20):
    with pytest.raises(ValueError):
        adaptive_rbm_optimize(modal20, g0=[1.0, 1.0])
    with pytest.raises(ValueError):
        adaptive_rbm_optimize(modal20, g0=[1.0, 1.0], g0_rr=[1.0, 1.0], D_test=grid(modal20.bounds, 2))


def test_restart_cap_gives_unconverged_outcome(modal20):
    D = grid(modal20.bounds, 4)
    out = adaptive_rbm_optimize(modal20, g0=[1.0, 1.0], D_test=D, tol_f=1e-12, max_restarts=0,
                                basis_tol=0.5)
    assert not out.converged and out.restarts == 0 and "restart cap" in out.message
    assert np.isnan(out.J_opt.value)


def test_restarts_on_truncated_bases():
    from dampopt.bench import example1_configs, example1_system, uniform_test_set

    mr = modal_transform(example1_system(40, config=example1_configs(40)[33]))
    D = uniform_test_set(mr.bounds, 16)
    out = adaptive_rbm_optimize(mr, D_test=D, tol_f=1e-3, basis_tol=0.3)
    assert out.converged and out.restarts >= 1
    r = [s[0] for s in out.basis_sizes]
    assert all(b > a for a, b in zip(r, r[1:]))
    blk = [tuple(g) for g in out.basis.used_params[1:]]
    assert len(blk) == len(set(blk)) == out.restarts
    assert np.linalg.norm(out.basis.V1 - out.basis.V1err @ (out.basis.V1err.T @ out.basis.V1)) <= 1e-8
    exact = optimize_exact(mr)
    np.testing.assert_allclose(out.g_opt, exact.g_opt, rtol=1e-2)
