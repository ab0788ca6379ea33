"""First/second fundamental form conventions and oracles."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from plastic_shell.forms import (first_form, first_forms, mid_edge_normals,
                                 pack_sym, rest_forms, second_form,
                                 second_forms, second_forms_from_normals,
                                 unpack_sym)
from plastic_shell.fixtures import cylinder, icosphere
from plastic_shell.mesh import TriangleMesh

from conftest import rigid_motion


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((7, 3))
    M = unpack_sym(v)
    assert M.shape == (7, 2, 2)
    assert_allclose(M[:, 0, 1], M[:, 1, 0], rtol=0, atol=0)
    assert_allclose(pack_sym(M), v, rtol=0, atol=0)
    # packing order is (00, 11, 01)
    one = unpack_sym(np.array([1.0, 2.0, 3.0]))
    assert_allclose(one, [[1.0, 3.0], [3.0, 2.0]], rtol=0, atol=0)


def test_first_form_right_triangle():
    # canonical parameter triangle maps to itself: a = I
    a = first_form([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert_allclose(a, np.eye(2), rtol=0, atol=0)


def test_first_form_hand_values():
    xi = np.array([1.0, 2.0, 3.0])
    xj = np.array([2.0, 2.0, 5.0])
    xk = np.array([1.0, 0.0, 4.0])
    e1, e2 = xj - xi, xk - xi
    a = first_form(xi, xj, xk)
    assert_allclose(a, [[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    assert_allclose(a, a.T, rtol=0, atol=0)


def test_first_form_det_is_four_area_squared():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.standard_normal((3, 3))
        a = first_form(*x)
        area = 0.5 * np.linalg.norm(np.cross(x[1] - x[0], x[2] - x[0]))
        assert_allclose(np.linalg.det(a), (2.0 * area) ** 2, rtol=1e-12)


def test_first_forms_batch_matches_single(plane):
    packed = first_forms(plane.rest_positions, plane.triangles)
    for t, (i, j, k) in enumerate(plane.triangles):
        a = first_form(plane.rest_positions[i], plane.rest_positions[j],
                       plane.rest_positions[k])
        assert_allclose(unpack_sym(packed[t]), a, rtol=0, atol=1e-15)


def test_second_form_flat_sheet_is_zero(plane):
    b = second_forms(plane, "rest")
    assert np.abs(b).max() < 1e-14


def test_second_form_hinge_hand_oracle():
    """Fold a two-triangle square along its diagonal and recompute the
    form entries with scalar arithmetic from the definition."""
    phi = 0.4
    V = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                  [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    F = np.array([[0, 1, 2], [0, 2, 3]])
    # rotate vertex 3 about the diagonal (0, 2)
    axis = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    c, s = np.cos(phi), np.sin(phi)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    W = V.copy()
    W[3] = R @ V[3]
    mesh = TriangleMesh(V, F, W)

    def unit_normal(p, q, r):
        n = np.cross(q - p, r - p)
        return n / np.linalg.norm(n)

    n0 = unit_normal(W[0], W[1], W[2])
    n1 = unit_normal(W[0], W[2], W[3])
    shared = (n0 + n1) / np.linalg.norm(n0 + n1)
    for t, (i, j, k) in enumerate(F):
        own = (n0, n1)[t]
        # edge normals opposite each local vertex; the diagonal is the
        # only interior edge, every boundary edge keeps the face normal
        en = []
        for l, (a_, b_) in enumerate(((j, k), (k, i), (i, j))):
            interior = {a_, b_} == {0, 2}
            en.append(shared if interior else own)
        u1, u2 = W[i] - W[j], W[i] - W[k]
        d1, d2 = en[0] - en[1], en[0] - en[2]
        expect = np.array([
            2.0 * d1 @ u1,
            2.0 * d2 @ u2,
            d1 @ u2 + d2 @ u1,
        ])
        got = second_forms(mesh)[t]
        assert_allclose(got, expect, rtol=1e-12, atol=1e-14)
        assert_allclose(second_form(mesh, t), unpack_sym(expect),
                        rtol=1e-12, atol=1e-14)
    # folding bends across the diagonal, the form must react
    assert np.abs(second_forms(mesh)).max() > 1e-2


def test_second_forms_from_normals_matches_state_path(sphere_small):
    pos = sphere_small.current_positions
    en = mid_edge_normals(sphere_small)
    direct = second_forms_from_normals(pos, sphere_small.triangles, en)
    assert_allclose(direct, second_forms(sphere_small), rtol=0, atol=0)


def test_cylinder_curvature_oracle():
    # developable prism: the mid-edge-normal form is exact, the shape
    # operator a^-1 b has eigenvalues -1/r (around) and 0 (along)
    r = 0.5
    mesh = cylinder(32, 10, radius=r)
    a = unpack_sym(first_forms(mesh.rest_positions, mesh.triangles))
    b = unpack_sym(second_forms(mesh, "rest"))
    eigs = np.sort(np.linalg.eigvals(np.linalg.solve(a, b)).real, axis=1)
    assert_allclose(eigs[:, 0], -1.0 / r, rtol=1e-9)
    assert np.abs(eigs[:, 1]).max() < 1e-9 / r


def test_sphere_curvature_oracle():
    mesh = icosphere(3, radius=1.0)
    a = unpack_sym(first_forms(mesh.rest_positions, mesh.triangles))
    b = unpack_sym(second_forms(mesh, "rest"))
    eigs = np.linalg.eigvals(np.linalg.solve(a, b)).real
    assert eigs.min() > -1.2 and eigs.max() < -0.8
    assert_allclose(eigs.mean(), -1.0, rtol=0.05)


def test_forms_rigid_invariance(sphere_small):
    rng = np.random.default_rng(5)
    Q, t = rigid_motion(rng)
    moved = TriangleMesh(sphere_small.rest_positions, sphere_small.triangles,
                         sphere_small.current_positions @ Q.T + t)
    assert_allclose(first_forms(moved.current_positions, moved.triangles),
                    first_forms(sphere_small.current_positions,
                                sphere_small.triangles),
                    rtol=1e-12, atol=1e-12)
    assert_allclose(second_forms(moved), second_forms(sphere_small),
                    rtol=1e-10, atol=1e-12)


def test_forms_scaling_laws(sphere_small):
    # lengths scale by c: a picks up c^2, b only c (normals are unit)
    c = 1.7
    scaled = TriangleMesh(sphere_small.rest_positions, sphere_small.triangles,
                          c * sphere_small.current_positions)
    assert_allclose(first_forms(scaled.current_positions, scaled.triangles),
                    c ** 2 * first_forms(sphere_small.current_positions,
                                         sphere_small.triangles), rtol=1e-12)
    assert_allclose(second_forms(scaled), c * second_forms(sphere_small),
                    rtol=1e-10, atol=1e-14)


def test_rest_forms_match_components(donut):
    a, b = rest_forms(donut)
    assert_allclose(a, first_forms(donut.rest_positions, donut.triangles),
                    rtol=0, atol=0)
    assert_allclose(b, second_forms(donut, "rest"), rtol=0, atol=0)


def test_mid_edge_normals_average_unit(tube):
    en = mid_edge_normals(tube)
    assert en.shape == (tube.n_triangles, 3, 3)
    assert_allclose(np.linalg.norm(en, axis=2), 1.0, rtol=1e-12)
