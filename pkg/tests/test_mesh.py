import numpy as np
import pytest

from plastic_shell.fixtures import icosphere, plane_grid
from plastic_shell.mesh import (MeshError, TriangleMesh, face_normals,
                                load_obj, mid_edge_normals, save_obj)

# two triangles sharing the diagonal of the unit square, consistent CCW
SQUARE_V = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
SQUARE_F = np.array([[0, 1, 2], [0, 2, 3]])


def test_edge_adjacency_and_wings():
    mesh = TriangleMesh(SQUARE_V, SQUARE_F)
    # local edge l is opposite vertex l: for (i, j, k) the edges are
    # (j, k), (k, i), (i, j). The shared diagonal (0, 2) is edge 1 of
    # triangle 0 and edge 2 of triangle 1.
    assert mesh.edge_adjacency[0].tolist() == [-1, 1, -1]
    assert mesh.edge_adjacency[1].tolist() == [-1, -1, 0]
    assert mesh.wing_vertices[0, 1] == 3
    assert mesh.wing_vertices[1, 2] == 1
    # boundary neighbor faces point back at the owner
    assert mesh.neighbor_faces[0].tolist() == [0, 1, 0]
    assert mesh.neighbor_faces[1].tolist() == [1, 1, 0]


def test_boundary_edges_square():
    mesh = TriangleMesh(SQUARE_V, SQUARE_F)
    edges = {tuple(e) for e in mesh.boundary_edges}
    assert edges == {(0, 1), (1, 2), (2, 3), (0, 3)}


def test_stencil_layout():
    mesh = TriangleMesh(SQUARE_V, SQUARE_F)
    # slots 0..2 own vertices, slot 3+l the wing across edge l
    assert mesh.stencil[0].tolist() == [0, 1, 2, 0, 3, 0]
    assert mesh.stencil_mask[0].tolist() == [True] * 3 + [False, True, False]
    assert mesh.stencil_dofs.shape == (2, 18)
    assert mesh.stencil_dofs[0, :3].tolist() == [0, 1, 2]
    assert mesh.stencil_dofs[0, 3:6].tolist() == [3, 4, 5]


def test_nonmanifold_rejected():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]])
    f = [[0, 1, 2], [0, 3, 1], [0, 1, 4]]  # edge (0,1) used three times
    with pytest.raises(MeshError, match="non-manifold"):
        TriangleMesh(v, f)


def test_inconsistent_orientation_rejected():
    f = np.array([[0, 1, 2], [0, 3, 2]])  # second triangle flipped
    with pytest.raises(MeshError, match="orientation"):
        TriangleMesh(SQUARE_V, f)


def test_degenerate_rest_rejected():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])  # collinear
    with pytest.raises(MeshError, match="area"):
        TriangleMesh(v, [[0, 1, 2]])


def test_repeated_vertex_rejected():
    with pytest.raises(MeshError, match="repeats"):
        TriangleMesh(SQUARE_V, [[0, 1, 1]])


def test_index_out_of_range_rejected():
    with pytest.raises(MeshError, match="range"):
        TriangleMesh(SQUARE_V, [[0, 1, 4]])


def test_face_normals_flat():
    n, two_a = face_normals(SQUARE_V, SQUARE_F)
    assert np.allclose(n, [[0, 0, 1], [0, 0, 1]])
    assert np.allclose(two_a, [1.0, 1.0])  # each triangle has area 1/2


def test_mid_edge_normals_flat_equal_face_normal():
    mesh = plane_grid(4, 4)
    en = mid_edge_normals(mesh)
    assert np.allclose(en, [[0, 0, 1]])


def test_mid_edge_normals_antiparallel_guard():
    # fold one triangle exactly onto the other: incident normals cancel
    v = SQUARE_V.copy()
    folded = v.copy()
    folded[3] = [1.0, 0.0, 0.0]  # vertex 3 lands on vertex 1
    with pytest.raises(MeshError, match="anti-parallel"):
        mesh = TriangleMesh(v, SQUARE_F, folded)
        mid_edge_normals(mesh)


def test_vertex_components():
    v = np.vstack([SQUARE_V, SQUARE_V + [10, 0, 0]])
    f = np.vstack([SQUARE_F, SQUARE_F + 4])
    mesh = TriangleMesh(v, f)
    labels = mesh.vertex_components()
    assert len(set(labels[:4])) == 1
    assert len(set(labels[4:])) == 1
    assert labels[0] != labels[4]


def test_obj_roundtrip(tmp_path):
    mesh = icosphere(1)
    path = tmp_path / "m.obj"
    save_obj(mesh, path)
    back = load_obj(path)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.rest_positions, mesh.current_positions)


def test_obj_accepts_slash_indices_and_comments(tmp_path):
    path = tmp_path / "m.obj"
    path.write_text("# header\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                    "vn 0 0 1\nf 1/1/1 2/2/1 3/3/1\nf 1//1 3//1 4//1\n")
    mesh = load_obj(path)
    assert mesh.n_vertices == 4
    assert mesh.n_triangles == 2


def test_obj_quad_fan_triangulated(tmp_path):
    path = tmp_path / "q.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = load_obj(path)
    assert mesh.n_triangles == 2
    assert mesh.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_bad_face_index(tmp_path):
    path = tmp_path / "b.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
    with pytest.raises(MeshError, match="1-based"):
        load_obj(path)


def test_bbox_diagonal():
    mesh = TriangleMesh(SQUARE_V, SQUARE_F)
    assert mesh.bbox_diagonal("rest") == pytest.approx(np.sqrt(2.0))


def test_face_areas():
    mesh = TriangleMesh(SQUARE_V, SQUARE_F)
    assert np.allclose(mesh.face_areas(), [0.5, 0.5])
