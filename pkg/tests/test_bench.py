import numpy as np
import pytest

from dampopt.bench import (BenchmarkSpec, ConfigResult, example1_configs, example1_masses,
                           example1_system, example2_configs, example2_masses,
                           example2_stiffness, example2_system, read_results_csv,
                           run_campaign, uniform_test_set, write_results_csv)
from dampopt.errors import ConstructionError
from dampopt.model import modal_transform


# --- Example 1 ------------------------------------------------------------------


def test_example1_published_masses():
    m = example1_masses(1900)
    assert m[0] == pytest.approx(143.85)
    assert m[475] == pytest.approx(72.6)
    assert m[1899] == pytest.approx(215.0)


def test_example1_published_input_block():
    s = example1_system(1900)
    assert s.B[474, 4] == 50.0
    rows = np.flatnonzero(np.any(s.B != 0, axis=1)) + 1
    assert rows.min() >= 471 and rows.max() <= 480
    assert s.C.shape == (18, 1900) and s.n == 1900


def test_example1_configs():
    c = example1_configs(1900)
    assert len(c) == 44 and c[33] == (350, 850)
    c190 = example1_configs(190)
    assert len(c190) == 44 and sorted({j for j, _ in c190}) == [5, 15, 25, 35]
    assert c190[33] == (35, 85)


def test_example1_scaled_stiffness():
    s = example1_system(40)
    K = s.K
    np.testing.assert_allclose(K, K.T)
    assert np.allclose(K[2:-2].sum(axis=1), 0.0)
    assert np.linalg.eigvalsh(K).min() > 0


def test_example1_dampers_and_bounds():
    s = example1_system(190, config=(35, 85))
    assert s.ell == 2
    np.testing.assert_array_equal(np.flatnonzero(s.F.sum(axis=1)) + 1, [35, 36, 85, 86])
    np.testing.assert_array_equal(s.bounds, [[500, 4000], [500, 4000]])


def test_example1_too_small():
    with pytest.raises(ConstructionError):
        example1_system(30)
    with pytest.raises(ConstructionError):
        example1_system(50, stiffness=np.ones(3))


# --- Example 2 ------------------------------------------------------------------


def test_example2_published_values():
    m = example2_masses(1000)
    assert m.shape == (2001,)
    assert m[2000] == 100.0
    assert m[499] == pytest.approx(50.0)
    assert m[500] == pytest.approx(501 / 30 + 33)
    assert np.all(m > 0)
    assert example2_stiffness(1000)[-1, -1] == 800.0


def test_example2_configs():
    c = example2_configs(1000)
    assert len(c) == 28 and c[24] == (850, 1450)
    assert len(example2_configs(50)) == 28


def test_example2_scaled_structure():
    s = example2_system(50)
    assert s.n == 101 and s.ell == 4
    assert np.linalg.eigvalsh(s.K).min() > 0
    np.testing.assert_allclose(s.F.sum(axis=0), 0.0)
    assert s.B.shape == (101, 21) and s.B[-1, 20] == 2000.0
    assert s.C.shape == (42, 101)
    np.testing.assert_array_equal(s.bounds, [[350, 7000]] * 4)
    with pytest.raises(ConstructionError):
        example2_system(20)


def test_modal_damping_identity_scaled():
    for s in (example1_system(190), example2_system(50)):
        mr = modal_transform(s)
        P = mr.Phi
        assert np.linalg.norm(P.T @ s.M @ P - np.eye(s.n)) <= 1e-9
        assert np.linalg.norm(P.T @ s.K @ P - np.diag(mr.Omega**2)) <= 1e-9 * np.linalg.norm(s.K)


# --- test sets and specs --------------------------------------------------------


def test_uniform_grid_and_halton():
    D = uniform_test_set([(0, 1), (10, 20)], 9)
    assert D.shape == (9, 2) and set(D[:, 0]) == {0.0, 0.5, 1.0}
    H = uniform_test_set([(350, 7000)] * 4, 21)
    assert H.shape == (21, 4)
    assert np.all(H >= 350) and np.all(H <= 7000)
    np.testing.assert_array_equal(H, uniform_test_set([(350, 7000)] * 4, 21))


def test_spec_validation():
    with pytest.raises(ConstructionError):
        BenchmarkSpec(family="example3")
    with pytest.raises(ConstructionError):
        BenchmarkSpec(scale=10)
    with pytest.raises(ConstructionError):
        BenchmarkSpec(scale=190, configs=(0,)).config_ids()
    spec = BenchmarkSpec(family="example2", scale=50)
    assert spec.test_set(np.array([[1, 2]] * 4)).shape == (21, 4)
    assert BenchmarkSpec().test_set(np.array([[1, 2]] * 2)).shape == (36, 2)


# --- campaign -------------------------------------------------------------------


SMALL = BenchmarkSpec(family="example1", scale=40, configs=(1, 34), grid_size=16)


def stable_columns(rows):
    return [(r.config_id, r.j, r.k, r.method, r.g_opt, r.J_opt, r.rel_gain_err, r.basis_r,
             r.basis_re, r.restarts, r.status) for r in rows]


@pytest.fixture(scope="module")
def small_campaign(tmp_path_factory):
    path = tmp_path_factory.mktemp("camp") / "results.csv"
    return run_campaign(SMALL, ("exact", "rbm", "adaptive"), csv_path=path), path


def test_campaign_rows_and_errors(small_campaign):
    rows, _ = small_campaign
    assert [(r.config_id, r.method) for r in rows] == [
        (1, "exact"), (1, "rbm"), (1, "adaptive"), (34, "exact"), (34, "rbm"), (34, "adaptive")]
    for r in rows:
        assert r.status == "converged" and r.wall_time_s > 0
        if r.method == "exact":
            assert r.rel_gain_err is None
        else:
            assert 0 <= r.rel_gain_err <= 1e-2
    assert rows[2].restarts is not None and rows[1].restarts is None


def test_campaign_csv_round_trip(small_campaign):
    rows, path = small_campaign
    text = path.read_text()
    assert text.splitlines()[0] == ("config_id,j,k,method,g_opt_1,g_opt_2,J_opt,rel_gain_err,"
                                    "wall_time_s,basis_r,basis_re,restarts,status,error")
    assert read_results_csv(path) == rows
    assert read_results_csv(text) == rows


def test_rbm_only_has_no_error_column():
    spec = BenchmarkSpec(family="example1", scale=40, configs=(2,), grid_size=9)
    rows = run_campaign(spec, ("rbm",))
    assert len(rows) == 1 and rows[0].rel_gain_err is None


def test_campaign_determinism_and_workers():
    spec = BenchmarkSpec(family="example1", scale=40, configs=(3, 4), grid_size=9)
    a = run_campaign(spec, ("exact", "rbm"))
    b = run_campaign(spec, ("exact", "rbm"))
    c = run_campaign(spec, ("exact", "rbm"), workers=2)
    assert stable_columns(a) == stable_columns(b) == stable_columns(c)


def test_failed_config_is_recorded():
    spec = BenchmarkSpec(family="example1", scale=40, configs=(1,), grid_size=4, tol_f=1e-300)
    rows = run_campaign(spec, ("rbm", "exact"))
    assert rows[0].status == "failed" and "ConvergenceError" in rows[0].error
    assert rows[1].status == "converged"
    text = write_results_csv(rows, None)
    assert read_results_csv(text)[0].status == "failed"


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        run_campaign(SMALL, ("magic",))


def test_csv_float_repr_round_trip():
    r = ConfigResult(1, 2, 3, "rbm", (0.1 + 0.2, 1e-17), 5.141000000000001, 3.3e-5, 1.25,
                     7, 9, None, "converged", "")
    assert read_results_csv(write_results_csv([r], None)) == [r]
