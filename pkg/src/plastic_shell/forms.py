"""Discrete first and second fundamental forms per triangle.

Conventions used throughout: for triangle (i, j, k) the parameterization
maps the canonical unit right triangle with u along x_j - x_i and v along
x_k - x_i. Symmetric 2x2 matrices are packed as (M00, M11, M01).
"""

import numpy as np

from .mesh import face_normals, average_edge_normals, mid_edge_normals


def pack_sym(M):
    """Pack symmetric 2x2 matrices (..., 2, 2) -> (..., 3) as (00, 11, 01)."""
    M = np.asarray(M)
    return np.stack([M[..., 0, 0], M[..., 1, 1], M[..., 0, 1]], axis=-1)


def unpack_sym(v):
    """Inverse of pack_sym."""
    v = np.asarray(v)
    M = np.empty(v.shape[:-1] + (2, 2), dtype=v.dtype)
    M[..., 0, 0] = v[..., 0]
    M[..., 1, 1] = v[..., 1]
    M[..., 0, 1] = v[..., 2]
    M[..., 1, 0] = v[..., 2]
    return M


def first_form(x_i, x_j, x_k):
    """First fundamental form of one triangle.

    Returns [[|e1|^2, e1.e2], [e1.e2, |e2|^2]] with e1 = x_j - x_i,
    e2 = x_k - x_i.
    """
    e1 = np.asarray(x_j, dtype=np.float64) - x_i
    e2 = np.asarray(x_k, dtype=np.float64) - x_i
    return np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])


def first_forms(positions, triangles):
    """Batched first forms, packed (m, 3) as (a00, a11, a01)."""
    p = positions[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return np.stack([
        np.einsum("mi,mi->m", e1, e1),
        np.einsum("mi,mi->m", e2, e2),
        np.einsum("mi,mi->m", e1, e2),
    ], axis=1)


def second_forms_from_normals(positions, triangles, edge_normals):
    """Batched symmetrized second forms, packed (m, 3).

    ``edge_normals[t, l]`` is the unit normal on the edge of triangle t
    opposite local vertex l. The raw matrix is
    2 * [[(n0-n1).u1, (n0-n1).u2], [(n0-n2).u1, (n0-n2).u2]]
    with u1 = x_i - x_j, u2 = x_i - x_k; symmetrization averages the
    off-diagonal pair.
    """
    p = positions[triangles]
    u1 = p[:, 0] - p[:, 1]
    u2 = p[:, 0] - p[:, 2]
    d1 = edge_normals[:, 0] - edge_normals[:, 1]
    d2 = edge_normals[:, 0] - edge_normals[:, 2]
    b01 = np.einsum("mi,mi->m", d1, u2)
    b10 = np.einsum("mi,mi->m", d2, u1)
    return np.stack([
        2.0 * np.einsum("mi,mi->m", d1, u1),
        2.0 * np.einsum("mi,mi->m", d2, u2),
        b01 + b10,                            # (2*b01 + 2*b10) / 2
    ], axis=1)


def second_forms(mesh, state="current"):
    """Batched symmetrized second forms for every triangle, packed (m, 3)."""
    pos = mesh.positions(state)
    n, _ = face_normals(pos, mesh.triangles)
    edge_n = average_edge_normals(n, mesh.neighbor_faces)
    return second_forms_from_normals(pos, mesh.triangles, edge_n)


def second_form(mesh, triangle, state="current"):
    """Symmetrized second fundamental form of one triangle as a 2x2 matrix."""
    packed = second_forms(mesh, state)[triangle]
    return unpack_sym(packed)


def rest_forms(mesh):
    """Rest first and second forms for every triangle, packed (m, 3) each."""
    a = first_forms(mesh.rest_positions, mesh.triangles)
    b = second_forms(mesh, "rest")
    return a, b


__all__ = [
    "first_form", "first_forms", "second_form", "second_forms",
    "second_forms_from_normals", "rest_forms", "pack_sym", "unpack_sym",
    "mid_edge_normals",
]
