import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccdiam import hamiltonian as ham
from ccdiam.calibration import (adapt_chart, build_calibration, calibrated_direction, calibration_from_json,
                                calibration_to_json, evaluate_calibration, inner_box, load_calibration,
                                minimizing_geodesic_through, save_calibration, seed_covector, verify_calibration)
from ccdiam.errors import ConstructionFailed, OutsideCalibratedSet, RankDeficient, RegularityError
from ccdiam.structures import C11, Box, SRStructure, builtin


def test_adapt_chart_examples():
    E = builtin("euclidean3")
    ch = adapt_chart(E, [1.0, -2.0, 0.5])
    np.testing.assert_allclose(ch.M, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(ch.to_adapted([1.0, -2.0, 0.5]), 0, atol=1e-15)
    H = builtin("heisenberg")
    np.testing.assert_allclose(adapt_chart(H, np.zeros(3)).M, np.eye(3), atol=1e-15)
    p = np.array([1.0, 2.0, 0.0])
    ch = adapt_chart(H, p)
    np.testing.assert_allclose(ch.M @ H.frame_matrix(p), np.eye(3)[:, :2], atol=1e-12)
    np.testing.assert_allclose(ch.M @ ch.Minv, np.eye(3), atol=1e-12)


def test_adapt_chart_errors():
    with pytest.raises(RegularityError):
        adapt_chart(builtin("grushin"), [0.5, 0.0])
    singular = builtin("grushin").with_regularity(C11)
    with pytest.raises(RankDeficient):
        adapt_chart(singular, [0.0, 0.0])


def test_seed_covector_examples():
    H = builtin("heisenberg")
    ch = adapt_chart(H, np.zeros(3))
    np.testing.assert_array_equal(seed_covector(H, ch, [[0.0, 0.0]]), [[1.0, 0.0, 0.0]])
    xp = np.array([[1.5, -0.3], [-2.0, 1.0], [0.2, 3.0]])
    xi = seed_covector(H, ch, xp)
    # X_1^1 = 1 and X_2^1 = 0 everywhere, so c = 1 (see ledger)
    np.testing.assert_allclose(xi, np.tile([1.0, 0.0, 0.0], (3, 1)), atol=1e-15)
    q = ch.to_chart(np.column_stack([np.zeros(3), xp]))
    np.testing.assert_allclose(ham.hamiltonian_values(H, q, ch.covector_to_chart(xi)), 0.5, atol=1e-12)
    E = builtin("euclidean2")
    np.testing.assert_array_equal(seed_covector(E, adapt_chart(E, [0.0, 0.0]), [[0.7]]), [[1.0, 0.0]])


def test_seed_covector_nontrivial_c():
    # at (1,2,0) the adapted first components vary with x' and c != 1
    H = builtin("heisenberg")
    ch = adapt_chart(H, [1.0, 2.0, 0.0])
    xp = np.array([[0.5, 0.5], [-0.4, 0.3]])
    xi = seed_covector(H, ch, xp)
    q = ch.to_chart(np.column_stack([np.zeros(2), xp]))
    np.testing.assert_allclose(ham.hamiltonian_values(H, q, ch.covector_to_chart(xi)), 0.5, atol=1e-12)
    assert np.all(xi[:, 0] > 0) and np.all(xi[:, 1:] == 0)


def test_euclidean_field(eucl_cf):
    CF = eucl_cf
    np.testing.assert_allclose(CF.Q_table, CF.param_grid, atol=1e-14)
    np.testing.assert_allclose(CF.Lam_table[..., 0], 1.0, atol=1e-15)
    np.testing.assert_allclose(CF.Lam_table[..., 1], 0.0, atol=1e-15)
    X = np.random.default_rng(0).uniform(-0.9, 0.9, size=(50, 2))
    np.testing.assert_allclose(evaluate_calibration(CF, X), np.tile([1.0, 0.0], (50, 1)), atol=1e-12)
    Y, h = calibrated_direction(CF, X)
    np.testing.assert_allclose(h, np.tile([1.0, 0.0], (50, 1)), atol=1e-12)
    rep = verify_calibration(CF, 2000, 0)
    assert rep.margin == pytest.approx(1.0, abs=1e-12)
    assert max(rep.loop_residuals) <= 1e-12


def test_heisenberg_build_invariants():
    H = builtin("heisenberg")
    CF = build_calibration(H, np.zeros(3), 0.2)
    assert CF.eps == 0.2
    Hv = ham.hamiltonian_values(H, CF.Q_table, CF.Lam_table)
    assert np.max(np.abs(2 * Hv - 1)) <= 1e-8
    assert np.min(np.abs(np.linalg.det(CF.DQ_table))) >= 0.5
    i0 = len(CF.t_grid) // 2
    np.testing.assert_allclose(CF.adapted_Q[i0][..., 0], 0, atol=1e-12)


def test_heisenberg_large_eps_shrinks():
    CF = build_calibration(builtin("heisenberg"), np.zeros(3), 10.0, 5, time_samples=9)
    assert CF.eps < 10.0
    assert any(entry["problems"] for entry in CF.build_log)


def test_build_rejects_c0():
    with pytest.raises(RegularityError):
        build_calibration(builtin("duplicated_line"), [0.0], 0.5)


def test_exhausted_shrink():
    with pytest.raises(ConstructionFailed):
        build_calibration(builtin("heisenberg"), np.zeros(3), 1.0, 5, time_samples=9, jac_lower_bound=2.0)


def test_round_trip_on_table(heis_cf):
    CF = heis_cf
    P = CF.param_grid[::8, ::4, ::4].reshape(-1, 3)
    X = CF.Q_table[::8, ::4, ::4].reshape(-1, 3)
    L = CF.Lam_table[::8, ::4, ::4].reshape(-1, 3)
    inv = CF.invert(X)
    assert np.all(inv.ok)
    np.testing.assert_allclose(inv.params, P, atol=1e-8)
    np.testing.assert_allclose(inv.lam, L, atol=1e-8)


def test_grid_point_matches_table(heis_cf):
    CF = heis_cf
    it = int(np.argmin(np.abs(CF.t_grid - 0.5)))
    ix = len(CF.x_grid) // 2
    x = CF.Q_table[it, ix, ix]
    np.testing.assert_allclose(evaluate_calibration(CF, x), CF.Lam_table[it, ix, ix], atol=1e-10)


def test_heisenberg_base_direction(heis_cf):
    Y, h = calibrated_direction(heis_cf, np.zeros(3))
    np.testing.assert_allclose(Y, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(h, [1, 0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(-0.9, 0.9), a=st.floats(-0.9, 0.9), b=st.floats(-0.9, 0.9))
def test_unit_controls_property(heis_cf, t, a, b):
    x, lam = heis_cf.forward([[t, a, b]])
    Y, h = calibrated_direction(heis_cf, x[0])
    assert np.linalg.norm(h) == pytest.approx(1.0, abs=1e-6)
    assert lam[0] @ Y == pytest.approx(1.0, abs=1e-6)


def test_base_slice_covector_is_positive_dx(heis_cf):
    lam = evaluate_calibration(heis_cf, np.array([[0.0, 0.3, -0.2], [0.0, -0.5, 0.4]]))
    assert np.all(lam[:, 0] > 0)
    np.testing.assert_allclose(lam[:, 1:], 0, atol=1e-10)


def test_outside_calibrated_set(heis_cf):
    with pytest.raises(OutsideCalibratedSet):
        evaluate_calibration(heis_cf, [3.9, 3.9, 3.9])


def test_verify_heisenberg(heis_cf):
    rep = verify_calibration(heis_cf, 10_000, 0)
    assert rep.margin <= 1 + 1e-6
    assert rep.unit_error <= 1e-6
    assert rep.inversion_failures == 0
    assert rep.loops_used == 6


def test_loop_order_off_origin():
    # at (1,2,0) Lam is not constant, so the trapezoid error is visible and decays like eta^2
    CF = build_calibration(builtin("heisenberg"), [1.0, 2.0, 0.0], 1.0)
    rep = verify_calibration(CF, 500, 0, n_loops=6, levels=3)
    assert rep.loop_residuals[0] > 1e-12
    assert rep.loop_order >= 1.8
    assert math.isfinite(rep.loop_constant)


def _rotated_heisenberg(R):
    H = builtin("heisenberg")
    big = Box(np.full(3, -6.0), np.full(3, 6.0))
    return SRStructure("heis_rot", 3, 2, big, C11, lambda y: R @ H.frame_matrix(y @ R) if y.ndim == 1
                       else np.einsum("ab,...bi->...ai", R, H.frame_matrix(y @ R)))


def test_chart_covariance():
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    R = R @ np.array([[1, 0, 0], [0, np.cos(0.3), -np.sin(0.3)], [0, np.sin(0.3), np.cos(0.3)]])
    p = np.array([0.5, -0.2, 0.1])
    CF = build_calibration(builtin("heisenberg"), p, 0.5, 9)
    CFr = build_calibration(_rotated_heisenberg(R), R @ p, 0.5, 9)
    X, _ = CF.forward([[0.2, 0.1, -0.1], [-0.3, 0.0, 0.2]])
    lam = evaluate_calibration(CF, X)
    lam_r = evaluate_calibration(CFr, X @ R.T)
    np.testing.assert_allclose(lam_r @ R, lam, atol=1e-8)


def test_json_round_trip(tmp_path, heis_cf):
    path = tmp_path / "cal.json"
    save_calibration(heis_cf, path)
    CF2 = load_calibration(path)
    a = verify_calibration(heis_cf, 500, 3, n_loops=2)
    b = verify_calibration(CF2, 500, 3, n_loops=2)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert calibration_to_json(calibration_from_json(calibration_to_json(heis_cf))) == calibration_to_json(heis_cf)


def test_inner_box_inside(heis_cf):
    box = inner_box(heis_cf)
    assert box.contains(heis_cf.base)
    corners = box.center + np.array(np.meshgrid(*[[-1, 1]] * 3)).reshape(3, -1).T * box.half_widths
    assert np.all(heis_cf.invert(corners).ok)


@pytest.mark.parametrize("name,r", [("heisenberg", 0.1), ("euclidean2", 0.1), ("flat_nonbracket", 0.1)])
def test_geodesic_examples(name, r):
    S = builtin(name)
    g = minimizing_geodesic_through(S, np.zeros(S.n), r, eps=0.5, margin_samples=500)
    assert g.length == pytest.approx(2 * r, abs=1e-8)
    expected = np.zeros((len(g.times), S.n))
    expected[:, 0] = g.times
    np.testing.assert_allclose(g.points, expected, atol=1e-12)
    np.testing.assert_allclose(g.controls, np.tile(np.eye(S.m)[0], (len(g.times), 1)), atol=1e-12)
    assert g.margin <= 1 + 1e-6


def test_geodesic_curved_martinet():
    g = minimizing_geodesic_through(builtin("martinet"), [0.3, -0.5, 0.2], 0.2, eps=0.6, margin_samples=500)
    assert g.length == pytest.approx(0.4, abs=1e-8)
    np.testing.assert_allclose(np.linalg.norm(g.controls, axis=1), 1.0, atol=1e-9)
