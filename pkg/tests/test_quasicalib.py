import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccdiam.errors import NotHorizontal, PointOutsideDomain, ZeroFrame
from ccdiam.quasicalib import (QuasiCalibration, build_quasicalibration, lambda_kernel_defect,
                               measure_quasicalibration_bounds, minimal_norm_preimage, quasicalibrated_flow)
from ccdiam.structures import C0, Box, SRStructure, builtin


def test_min_norm_examples():
    D = builtin("duplicated_line")
    h = minimal_norm_preimage(D, [0.3], [1.0])
    np.testing.assert_allclose(h, [0.5, 0.5], atol=1e-15)
    assert np.linalg.norm(h) == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    np.testing.assert_allclose(minimal_norm_preimage(builtin("grushin"), [0.0, 0.0], [1.0, 0.0]), [1, 0], atol=1e-15)
    H = builtin("heisenberg")
    p = np.array([1.0, 2.0, 0.0])
    v = H.frame_matrix(p) @ np.array([0.3, -0.7])
    np.testing.assert_allclose(minimal_norm_preimage(H, p, v), [0.3, -0.7], atol=1e-14)
    E = builtin("euclidean2")
    np.testing.assert_allclose(minimal_norm_preimage(E, [0, 0], [2.0, -1.0]), [2, -1])


def test_not_horizontal():
    with pytest.raises(NotHorizontal):
        minimal_norm_preimage(builtin("grushin"), [0.0, 0.0], [0.0, 1.0])
    with pytest.raises(NotHorizontal):
        minimal_norm_preimage(builtin("heisenberg"), [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x=st.floats(-1.5, 1.5))
def test_min_norm_is_orthogonal_to_kernel(a, b, x):
    # frame on R^1 with three fields (1, x, 1 + x^2): kernel is 2-dimensional
    S = SRStructure("three_on_line", 1, 3, Box(np.array([-2.0]), np.array([2.0])), C0,
                    lambda q: np.stack([np.ones_like(q), q, 1 + q * q], axis=-1))
    A = S.frame_matrix(np.array([x]))
    v = A @ np.array([a, b, 1.0])
    h = minimal_norm_preimage(S, [x], v)
    np.testing.assert_allclose(A @ h, v, atol=1e-10)
    _, _, Vt = np.linalg.svd(A)
    np.testing.assert_allclose(Vt[1:] @ h, 0, atol=1e-10)


def test_euclidean_quasicalibration():
    QC = build_quasicalibration(builtin("euclidean2"), [0.5, 0.5], 0.1)
    assert QC.pivot == 0
    np.testing.assert_allclose(QC.hbar, [1, 0])
    np.testing.assert_allclose(QC.omega, [1, 0])
    assert QC.eps1 == 0 and QC.eps2 == 0
    assert np.array_equal(QC.U.lo, builtin("euclidean2").domain.lo)


@pytest.mark.parametrize("p", [[1.0, 0.0], [0.0, 0.0]])
def test_grushin_quasicalibration(p):
    G = builtin("grushin")
    QC = build_quasicalibration(G, p, 0.05)
    assert QC.pivot == 0
    np.testing.assert_allclose(QC.hbar, [1, 0], atol=1e-15)
    np.testing.assert_allclose(QC.omega, [1, 0], atol=1e-15)
    assert QC.eps1 <= 0.05 and QC.eps2 <= 0.05 ** 2
    e = measure_quasicalibration_bounds(QC, G, Box(np.array([0.9, -0.1]), np.array([1.1, 0.1])), 500, 0)
    assert e == (0.0, 0.0)


def test_invariants_at_p():
    for name, p in [("duplicated_line", [0.0]), ("grushin", [0.0, 0.0]), ("martinet", [0.5, 0.1, 0.0])]:
        S = builtin(name)
        QC = build_quasicalibration(S, p, 0.05)
        A = S.frame_matrix(np.asarray(p, dtype=float))
        np.testing.assert_allclose(A @ QC.hbar, A[:, QC.pivot], atol=1e-10)
        np.testing.assert_allclose(QC.omega @ A, QC.lam, atol=1e-10)
        assert lambda_kernel_defect(QC, 100, 0) <= 1e-10


def test_duplicated_line_values():
    QC = build_quasicalibration(builtin("duplicated_line"), [0.0], 0.05)
    np.testing.assert_allclose(QC.hbar, [0.5, 0.5])
    np.testing.assert_allclose(QC.lam, [1 / np.sqrt(2)] * 2)
    np.testing.assert_allclose(QC.omega, [1 / np.sqrt(2)])
    assert QC.eps1 == 0 and QC.eps2 == pytest.approx(0, abs=1e-15)


def test_zero_frame():
    S = SRStructure("zero_at_0", 1, 1, Box(np.array([-1.0]), np.array([1.0])), C0, lambda q: q[..., None])
    with pytest.raises(ZeroFrame):
        build_quasicalibration(S, [0.0], 0.1)
    with pytest.raises(ValueError):
        build_quasicalibration(builtin("grushin"), [0.0, 0.0], 1.5)


def test_slacks_vanish_on_shrinking_boxes():
    H = builtin("heisenberg").with_regularity(C0)
    QC = build_quasicalibration(H, np.zeros(3), 0.05)
    prev = (np.inf, np.inf)
    for rho in (2.0, 1.0, 0.5, 0.25, 0.125, 0.0625):
        e = measure_quasicalibration_bounds(QC, H, Box.around(np.zeros(3), rho), 500, 0)
        assert e[0] <= prev[0] + 1e-15 and e[1] <= prev[1] + 1e-15
        prev = e
    assert prev[0] < 2e-3 and prev[1] < 2e-3


@settings(max_examples=20, deadline=None)
@given(r1=st.floats(0.05, 2.0), frac=st.floats(0.1, 1.0), cx=st.floats(-0.5, 0.5))
def test_monotone_on_nested_boxes(r1, frac, cx):
    # the box sample is not nested, so compare against the exact maxima on a common dense sample
    G = builtin("grushin")
    QC = build_quasicalibration(G, [1.0, 0.0], 0.5)
    outer = Box.around(np.array([1.0 + cx, 0.0]), r1).intersect(G.domain)
    inner = Box.around(np.array([1.0 + cx, 0.0]), r1 * frac).intersect(G.domain)
    eo = measure_quasicalibration_bounds(QC, G, outer, 400, 0)
    ei = measure_quasicalibration_bounds(QC, G, inner, 400, 0)
    # Grushin slack depends on |x| only and is monotone in the box, structured points include the corners
    assert ei[0] <= eo[0] + 1e-12
    assert ei[1] <= eo[1] + 1e-12


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_scale_covariance(c):
    G = builtin("grushin")
    Gc = G.scaled(c)
    QC = build_quasicalibration(G, [1.0, 0.0], 0.3)
    QCc = build_quasicalibration(Gc, [1.0, 0.0], 0.3)
    # hbar solves c A h = c X_pivot, so it is unchanged; preimages of a fixed vector scale by 1/c
    np.testing.assert_allclose(QCc.hbar, QC.hbar, rtol=1e-12)
    v = np.array([1.0, 0.0])
    np.testing.assert_allclose(minimal_norm_preimage(Gc, [1.0, 0.0], v),
                               minimal_norm_preimage(G, [1.0, 0.0], v) / c, rtol=1e-12)
    np.testing.assert_allclose(QCc.omega, QC.omega / c, rtol=1e-12)
    box = Box.around(np.array([1.0, 0.0]), 0.4)
    a = measure_quasicalibration_bounds(QC, G, box, 300, 1)
    b = measure_quasicalibration_bounds(QCc, Gc, box, 300, 1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_measure_rejects_box_outside_domain():
    QC = build_quasicalibration(builtin("grushin"), [0.0, 0.0], 0.1)
    with pytest.raises(PointOutsideDomain):
        measure_quasicalibration_bounds(QC, builtin("grushin"), Box.around(np.zeros(2), 5.0))


def test_flow_examples():
    E = builtin("euclidean2")
    QCe = build_quasicalibration(E, [0.0, 0.0], 0.1)
    c = quasicalibrated_flow(QCe, E, [0.2, 0.3], 1.0, 50)
    np.testing.assert_allclose(c.points, np.column_stack([0.2 + c.times, np.full(101, 0.3)]), atol=1e-14)
    G = builtin("grushin")
    c = quasicalibrated_flow(build_quasicalibration(G, [0.0, 0.0], 0.05), G, [0.0, 0.0], 0.5, 40)
    np.testing.assert_allclose(c.points, np.column_stack([c.times, np.zeros(81)]), atol=1e-15)
    D = builtin("duplicated_line")
    QCd = build_quasicalibration(D, [0.0], 0.05)
    c = quasicalibrated_flow(QCd, D, [0.0], 1.0, 20)
    # constant control (1/sqrt2, 1/sqrt2) gives chart speed sqrt 2
    np.testing.assert_allclose(c.points[:, 0], np.sqrt(2) * c.times, atol=1e-14)
    assert c.status == "ok"


def test_flow_controls_admissible():
    for name, p in [("duplicated_line", [0.0]), ("grushin", [0.0, 0.0])]:
        S = builtin(name)
        QC = build_quasicalibration(S, p, 0.05)
        c = quasicalibrated_flow(QC, S, p, 0.2, 100)
        v = np.gradient(c.points, c.times, axis=0)
        for x, vx in zip(c.points[1:-1], v[1:-1]):
            assert np.linalg.norm(minimal_norm_preimage(S, x, vx)) <= 1 + 1e-8


def test_flow_boundary_hit():
    D = builtin("duplicated_line")
    c = quasicalibrated_flow(build_quasicalibration(D, [0.0], 0.05), D, [3.5], 1.0, 50)
    assert c.status == "boundary_hit"
    assert np.all(D.domain.contains(c.points))


def test_json_round_trip(tmp_path):
    QC = build_quasicalibration(builtin("grushin"), [0.0, 0.0], 0.05)
    QC.save(tmp_path / "qc.json")
    QC2 = QuasiCalibration.load(tmp_path / "qc.json")
    assert QC2.to_json() == QC.to_json()
    assert measure_quasicalibration_bounds(QC2, QC2.structure, QC2.U, 300, 0) == \
        measure_quasicalibration_bounds(QC, QC.structure, QC.U, 300, 0)
