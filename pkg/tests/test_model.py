import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dampopt.bench import example1_system, example2_system
from dampopt.checks import random_system
from dampopt.errors import ConstructionError
from dampopt.model import (ModeBlocks, SecondOrderSystem, assemble_operator,
                           build_internal_damping, first_order_dense, load_system,
                           modal_transform, save_system, system_from_dict, system_to_dict)

from conftest import modal_first_order


def test_internal_damping_identity():
    D = build_internal_damping(np.eye(3), np.eye(3), 0.005)
    np.testing.assert_allclose(D, 0.01 * np.eye(3), atol=1e-15)


def test_internal_damping_scalar():
    D = build_internal_damping(np.array([[4.0]]), np.array([[9.0]]), 0.5)
    np.testing.assert_allclose(D, [[6.0]], rtol=1e-14)


def test_internal_damping_rejects_non_spd():
    with pytest.raises(ConstructionError, match="K"):
        build_internal_damping(np.eye(2), np.diag([1.0, -1.0]), 0.1)
    with pytest.raises(ConstructionError, match="M"):
        build_internal_damping(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2), 0.1)


def test_internal_damping_is_diagonalised_by_modes():
    s = example1_system(40)
    # first 10 masses of the chain as a standalone system
    M, K = s.M[:10, :10], s.K[:10, :10]
    D = build_internal_damping(M, K, 0.005)
    lam, Q = np.linalg.eigh(np.diag(np.diag(M) ** -0.5) @ K @ np.diag(np.diag(M) ** -0.5))
    Phi = np.diag(np.diag(M) ** -0.5) @ Q
    err = np.linalg.norm(Phi.T @ D @ Phi - 2 * 0.005 * np.diag(np.sqrt(lam)))
    assert err <= 1e-10


def test_modal_transform_diagonal_case():
    s = SecondOrderSystem(np.eye(3), np.diag([1.0, 4.0, 9.0]), 0.01, np.ones((3, 1)),
                          np.ones((1, 3)), np.zeros((3, 1)), [(1.0, 2.0)])
    mr = modal_transform(s)
    np.testing.assert_allclose(mr.Omega, [1, 2, 3], rtol=1e-14)
    np.testing.assert_allclose(np.abs(mr.Phi), np.eye(3), atol=1e-14)


def test_modal_transform_scalar():
    s = SecondOrderSystem([[4.0]], [[9.0]], 0.01, [[1.0]], [[1.0]], [[1.0]], [(1.0, 2.0)])
    mr = modal_transform(s)
    np.testing.assert_allclose(mr.Phi, [[0.5]])
    np.testing.assert_allclose(mr.Omega, [1.5])


def _modal_defects(s):
    mr = modal_transform(s)
    Phi = mr.Phi
    Dint = s.internal_damping()
    return (np.linalg.norm(Phi.T @ s.M @ Phi - np.eye(s.n)) / s.n,
            np.linalg.norm(Phi.T @ s.K @ Phi - np.diag(mr.Omega**2)) / np.linalg.norm(s.K),
            np.linalg.norm(Phi.T @ Dint @ Phi - 2 * s.alpha * np.diag(mr.Omega))
            / np.linalg.norm(Dint))


def test_modal_identities_random_spd(rng):
    M = rng.standard_normal((8, 8))
    M = M @ M.T + 8 * np.eye(8)
    K = rng.standard_normal((8, 8))
    K = K @ K.T + np.eye(8)
    s = SecondOrderSystem(M, K, 0.02, np.ones((8, 1)), np.ones((1, 8)), np.eye(8)[:, :1],
                          [(1.0, 2.0)])
    assert max(_modal_defects(s)) <= 1e-10


@pytest.mark.parametrize("make", [lambda: example1_system(190), lambda: example2_system(50)])
def test_modal_identities_benchmarks(make):
    assert max(_modal_defects(make())) <= 1e-9


def test_modal_ordering_and_signs(small_modal):
    assert np.all(np.diff(small_modal.Omega) > 0)
    Phi = small_modal.Phi
    pivots = Phi[np.argmax(np.abs(Phi), axis=0), np.arange(Phi.shape[1])]
    assert np.all(pivots > 0)


def test_operator_zero_gain_is_tilde(small_modal):
    op = assemble_operator(small_modal, np.zeros(2))
    np.testing.assert_array_equal(op.to_dense(), small_modal.tilde_blocks().to_dense())


def test_operator_single_mode():
    s = SecondOrderSystem([[1.0]], [[4.0]], 0.1, [[1.0]], [[1.0]], np.zeros((1, 0)),
                          np.zeros((0, 2)))
    mr = modal_transform(s)
    op = assemble_operator(mr, np.zeros(0))
    np.testing.assert_allclose(op.to_dense(), [[0, 1], [-4, -0.4]], atol=1e-15)


def test_operator_dense_matches_explicit_assembly(rng):
    mr = modal_transform(random_system(rng, 5, ell=2))
    g = rng.uniform(100, 1000, 2)
    A, _, _ = modal_first_order(mr, g)
    op = assemble_operator(mr, g)
    np.testing.assert_allclose(op.to_dense(), A, atol=1e-14 * np.abs(A).max())


def test_operator_products_and_solve(rng):
    mr = modal_transform(random_system(rng, 30, ell=3))
    g = rng.uniform(100, 1e4, 3)
    op = assemble_operator(mr, g)
    A = op.to_dense()
    X = rng.standard_normal((60, 4))
    for got, want in ((op.matvec(X), A @ X), (op.rmatvec(X), A.T @ X),
                      (op.solve(X), np.linalg.solve(A, X))):
        assert np.linalg.norm(got - want) <= 1e-12 * np.linalg.norm(want)


def test_operator_matches_untransformed_system(rng):
    s = random_system(rng, 6)
    mr = modal_transform(s)
    g = np.array([300.0, 700.0])
    A0, _, _ = first_order_dense(s, g)
    A = assemble_operator(mr, g).to_dense()
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(A)),
                               np.sort_complex(np.linalg.eigvals(A0)), rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12),
       gains=st.lists(st.floats(0, 1e4), min_size=2, max_size=2))
def test_operator_is_stable_for_nonnegative_gains(seed, n, gains):
    mr = modal_transform(random_system(np.random.default_rng(seed), n))
    lam = np.linalg.eigvals(assemble_operator(mr, gains).to_dense())
    assert np.all(lam.real < 0)


def test_mode_blocks_algebra(rng):
    n = 4
    blocks = ModeBlocks(*(rng.standard_normal(n) for _ in range(4)))
    blocks = blocks.shift(3.0)
    T = blocks.to_dense()
    X = rng.standard_normal((2 * n, 3))
    np.testing.assert_allclose(blocks.apply(X), T @ X, atol=1e-13)
    np.testing.assert_allclose(blocks.apply_T(X), T.T @ X, atol=1e-13)
    np.testing.assert_allclose(blocks.solve(X), np.linalg.solve(T, X), atol=1e-10)
    np.testing.assert_allclose(blocks.inverse().to_dense(), np.linalg.inv(T), atol=1e-10)
    assert np.isclose(blocks.fro2(), np.sum(T**2))


def test_construction_errors():
    with pytest.raises(ConstructionError):
        SecondOrderSystem(np.eye(2), np.eye(2), 0.1, np.ones((2, 1)), np.ones((1, 2)),
                          np.eye(2), [(0.0, 1.0), (1.0, 2.0)])
    with pytest.raises(ConstructionError):
        SecondOrderSystem(np.eye(2), np.eye(2), 0.1, np.ones((2, 1)), np.ones((1, 2)),
                          np.eye(2), [(2.0, 1.0), (1.0, 2.0)])
    with pytest.raises(ConstructionError):
        SecondOrderSystem(np.eye(2), np.eye(2), 0.1, np.ones((2, 1)), np.ones((1, 2)),
                          np.ones((2, 3)), [(1.0, 2.0)] * 3)
    with pytest.raises(ConstructionError):
        SecondOrderSystem(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2), 0.1,
                          np.ones((2, 1)), np.ones((1, 2)), np.eye(2)[:, :1], [(1.0, 2.0)])


def test_damper_gain_dimension_check(small_modal):
    with pytest.raises(ConstructionError):
        assemble_operator(small_modal, [1.0, 2.0, 3.0])


def test_serialisation_round_trip(tmp_path):
    s = example2_system(30)
    path = tmp_path / "sys.json"
    save_system(s, path)
    t = load_system(path)
    for name in ("M", "K", "B", "C", "F", "bounds", "groups"):
        np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
    assert t.alpha == s.alpha
    doc = json.loads(path.read_text())
    assert doc["n"] == 61
    assert system_to_dict(system_from_dict(doc)) == doc
