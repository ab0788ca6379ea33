"""Smoothness operator on the plastic strain field.

Differences of theta between edge-adjacent triangles are taken verbatim in
global coordinates. Differences of the stretch s are taken after
transporting the neighbor's material coordinates across the shared edge:
unfold the neighbor about the rest edge into this triangle's plane and
rotate between the two material frames (u axis along each triangle's first
edge). The whole thing assembles into one sparse operator on packed p so
that ||L p||^2 = sum_i ||L_theta_i||^2 + ||L_s_i||_F^2.
"""

import numpy as np
from scipy import sparse

from .mesh import MeshError, face_normals
from .plasticity import mat_s

_SQRT2 = np.sqrt(2.0)


class StrainLaplacian:
    """Assembled operator plus the per-edge material transports.

    transport[(i, j)] is the 2x2 rotation carrying triangle j's material
    coordinates into triangle i's frame; both directions of every interior
    dual edge are present and transport[(j, i)] = transport[(i, j)].T.
    """

    def __init__(self, operator, transport):
        self.operator = operator
        self.transport = transport

    def __matmul__(self, p):
        return self.operator @ p


def _material_frames(mesh):
    """Orthonormal rest tangent frames (e1 along the first edge), (m, 3) each."""
    p = mesh.rest_positions[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    n1 = np.linalg.norm(e1, axis=1)
    if np.any(n1 < 1e-14):
        raise MeshError(f"triangle {int(np.argmin(n1))}: degenerate edge")
    e1 = e1 / n1[:, None]
    n, _ = face_normals(mesh.rest_positions, mesh.triangles)
    return e1, np.cross(n, e1)


def _edge_angles(mesh, e1, e2, tt, ll):
    """Angle of each listed triangle's local edge ll in the (e1, e2) frame."""
    tris = mesh.triangles
    a = tris[tt, (ll + 1) % 3]
    b = tris[tt, (ll + 2) % 3]
    d = mesh.rest_positions[b] - mesh.rest_positions[a]
    return d, np.arctan2(np.einsum("ki,ki->k", e2[tt], d),
                         np.einsum("ki,ki->k", e1[tt], d))


def edge_transport(mesh, tri_i, tri_j):
    """Rotation carrying triangle j's material coordinates into triangle i.

    Unfolds j about the shared rest edge into i's plane; since both material
    frames see the shared edge, the transport is the in-plane rotation by
    the difference of the edge's frame angles.
    """
    row = np.nonzero(mesh.edge_adjacency[tri_i] == tri_j)[0]
    if not len(row):
        raise MeshError(
            f"triangles {tri_i} and {tri_j} do not share an interior edge")
    l = int(row[0])
    e1, e2 = _material_frames(mesh)
    d, phi_i = _edge_angles(mesh, e1, e2, np.array([tri_i]), np.array([l]))
    d = d[0]
    phi_j = np.arctan2(e2[tri_j] @ d, e1[tri_j] @ d)
    delta = phi_i[0] - phi_j
    c, s = np.cos(delta), np.sin(delta)
    return np.array([[c, -s], [s, c]])


def _directed_transports(mesh):
    """cos/sin of the frame rotation for every directed interior dual edge."""
    mask = mesh.edge_adjacency >= 0
    tt, ll = np.nonzero(mask)
    gg = mesh.edge_adjacency[tt, ll]
    e1, e2 = _material_frames(mesh)
    d, phi_t = _edge_angles(mesh, e1, e2, tt, ll)
    phi_g = np.arctan2(np.einsum("ki,ki->k", e2[gg], d),
                       np.einsum("ki,ki->k", e1[gg], d))
    delta = phi_t - phi_g
    return tt, gg, np.cos(delta), np.sin(delta)


def _conjugation_packed(c, s):
    """Packed action of M -> Q M Q^T for Q = [[c, -s], [s, c]], (k, 3, 3)."""
    K = np.empty((len(c), 3, 3))
    cc, ss, cs = c * c, s * s, c * s
    K[:, 0] = np.stack([cc, ss, -2.0 * cs], axis=1)
    K[:, 1] = np.stack([ss, cc, 2.0 * cs], axis=1)
    K[:, 2] = np.stack([cs, -cs, cc - ss], axis=1)
    return K


def apply_theta_laplacian(field, mesh):
    """Per-triangle residuals sum_j (theta_i - theta_j), (m, 3)."""
    mask = mesh.edge_adjacency >= 0
    deg = mask.sum(axis=1)
    tt, ll = np.nonzero(mask)
    gg = mesh.edge_adjacency[tt, ll]
    res = deg[:, None] * field.theta
    np.subtract.at(res, tt, field.theta[gg])
    return res


def apply_s_laplacian(field, transport):
    """Per-triangle residuals sum_j mat(s_i) - Q_ji mat(s_j) Q_ji^T, packed.

    transport is the directed dict from StrainLaplacian; packing is plain
    (s00, s11, s01) with no off-diagonal weighting.
    """
    S = mat_s(field.s)
    res = np.zeros((field.n_triangles, 3))
    for (i, j), Q in transport.items():
        D = S[i] - Q @ S[j] @ Q.T
        res[i] += (D[0, 0], D[1, 1], D[0, 1])
    return res


def assemble_operator(mesh, lambda_theta=1.0, lambda_s=1.0):
    """Build the sparse 6m x 6m smoothness operator.

    Row layout matches the packed field: per triangle three theta rows then
    three s rows. The s off-diagonal row carries weight sqrt(2) so the
    quadratic form reproduces the Frobenius norm of the matrix residual;
    lambda_theta / lambda_s scale the two blocks of the quadratic form.
    """
    m = mesh.n_triangles
    tt, gg, c, s = _directed_transports(mesh)
    deg = np.zeros(m)
    np.add.at(deg, tt, 1.0)
    wt = np.sqrt(lambda_theta)
    ws = np.sqrt(lambda_s) * np.array([1.0, 1.0, _SQRT2])

    rows, cols, vals = [], [], []
    r3 = np.arange(3)
    all_t = np.arange(m)
    # diagonal blocks
    rows.append((6 * all_t[:, None] + r3).ravel())
    cols.append((6 * all_t[:, None] + r3).ravel())
    vals.append((wt * deg[:, None] * np.ones(3)).ravel())
    rows.append((6 * all_t[:, None] + 3 + r3).ravel())
    cols.append((6 * all_t[:, None] + 3 + r3).ravel())
    vals.append((deg[:, None] * ws).ravel())
    # neighbor blocks
    rows.append((6 * tt[:, None] + r3).ravel())
    cols.append((6 * gg[:, None] + r3).ravel())
    vals.append(np.full(3 * len(tt), -wt))
    K = _conjugation_packed(c, s) * ws[None, :, None]
    rows.append(np.broadcast_to((6 * tt + 3)[:, None, None] + r3[:, None],
                                K.shape).ravel())
    cols.append(np.broadcast_to((6 * gg + 3)[:, None, None] + r3[None, :],
                                K.shape).ravel())
    vals.append(-K.ravel())

    op = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(6 * m, 6 * m)).tocsr()
    transport = {}
    for k in range(len(tt)):
        Q = np.array([[c[k], -s[k]], [s[k], c[k]]])
        transport[(int(tt[k]), int(gg[k]))] = Q
    return StrainLaplacian(op, transport)
