"""Rotation-strain parameterization of plastic deformation.

Each triangle carries a rotation vector theta (exponential map, |theta| < pi)
and a packed symmetric positive definite 2x2 stretch s with
mat(s) = [[s0, s2], [s2, s1]]. The pair deforms the rest fundamental forms
into target forms (abar, bbar) that are compatible by construction:
    abar = S^T atilde S
    bbar = S^T (M + M^T) S,  M[r][c] = (nbar_0 - nbar_{r+1}) . (R utilde_c)
with nbar the mid-edge normals rebuilt from the rotated rest face normals.

The global DoF vector p stacks [theta, s] per triangle in mesh order.
"""

import numpy as np
from scipy import sparse

from .forms import first_forms, pack_sym, unpack_sym
from .mesh import MeshError, average_edge_normals, face_normals


class FieldError(ValueError):
    """Raised for invalid plastic strain fields or failed target builds."""


# ----------------------------------------------------------------------
# rotation helpers (batched over leading axes)

def _skew(v):
    z = np.zeros(v.shape[:-1], dtype=np.float64)
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def _sin_cos_coeffs(tau):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero
    small = tau < 1e-4
    safe = np.where(small, 1.0, tau)
    t2 = tau * tau
    A = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                 np.sin(safe) / safe)
    B = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                 (safe - np.sin(safe)) / (safe * safe * safe))
    return A, B, C


def rodrigues(theta):
    """Rotation matrix of an exponential-map 3-vector (batched: (..., 3)).

    R = I + sin|t|/|t| [t]x + (1-cos|t|)/|t|^2 [t]x^2; theta = 0 returns
    the exact identity.
    """
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.linalg.norm(theta, axis=-1)
    A, B, _ = _sin_cos_coeffs(tau)
    K = _skew(theta)
    K2 = K @ K
    return (np.eye(3) + A[..., None, None] * K + B[..., None, None] * K2)


def rotation_left_jacobian(theta):
    """Left Jacobian J_l of the exponential map: d(R v) = -[R v]x J_l dtheta."""
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.linalg.norm(theta, axis=-1)
    _, B, C = _sin_cos_coeffs(tau)
    K = _skew(theta)
    return (np.eye(3) + B[..., None, None] * K + C[..., None, None] * (K @ K))


# ----------------------------------------------------------------------
# field container

def mat_s(s):
    """Packed stretch (..., 3) -> symmetric 2x2 [[s0, s2], [s2, s1]]."""
    s = np.asarray(s, dtype=np.float64)
    M = np.empty(s.shape[:-1] + (2, 2))
    M[..., 0, 0] = s[..., 0]
    M[..., 1, 1] = s[..., 1]
    M[..., 0, 1] = M[..., 1, 0] = s[..., 2]
    return M


def field_violations(theta, s):
    """Indices of triangles violating |theta| < pi or mat(s) pos. definite."""
    tau = np.linalg.norm(theta, axis=1)
    det = s[:, 0] * s[:, 1] - s[:, 2] * s[:, 2]
    trace = s[:, 0] + s[:, 1]
    return np.nonzero((tau >= np.pi) | (det <= 0.0) | (trace <= 0.0))[0]


class PlasticStrainField:
    """Per-triangle rotation vectors and packed stretches.

    Parameters
    ----------
    theta : (m, 3) array
    s : (m, 3) array
    validate : bool
        Reject fields violating |theta| < pi or positive definiteness.
    """

    def __init__(self, theta, s, validate=True):
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        self.s = np.ascontiguousarray(s, dtype=np.float64)
        if self.theta.shape != self.s.shape or self.theta.ndim != 2 \
                or self.theta.shape[1] != 3:
            raise FieldError(
                f"field arrays must both be (m, 3), got {self.theta.shape} "
                f"and {self.s.shape}")
        if validate:
            bad = field_violations(self.theta, self.s)
            if len(bad):
                raise FieldError(
                    f"triangle {int(bad[0])}: invalid plastic coordinates "
                    "(need |theta| < pi and positive definite stretch)")

    @property
    def n_triangles(self):
        return len(self.theta)

    @property
    def packed(self):
        """Flat (6m,) vector, per-triangle [theta0..2, s0..2]."""
        return np.concatenate([self.theta, self.s], axis=1).ravel()

    @classmethod
    def identity(cls, n_triangles):
        theta = np.zeros((n_triangles, 3))
        s = np.zeros((n_triangles, 3))
        s[:, 0] = s[:, 1] = 1.0
        return cls(theta, s)

    @classmethod
    def from_packed(cls, p, validate=True):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 1 or p.size % 6:
            raise FieldError(f"packed field length {p.size} not 6m")
        blocks = p.reshape(-1, 6)
        return cls(blocks[:, :3], blocks[:, 3:], validate=validate)

    def copy(self):
        return PlasticStrainField(self.theta.copy(), self.s.copy(),
                                  validate=False)


def identity_packed(n_triangles):
    """The reference vector p0: theta = 0, s = vec(I) per triangle."""
    return PlasticStrainField.identity(n_triangles).packed


def save_field(field, path):
    """Write the packed field as text, one double per line."""
    np.savetxt(path, field.packed, fmt="%.17g")


def load_field(path):
    p = np.loadtxt(path, dtype=np.float64).ravel()
    return PlasticStrainField.from_packed(p)


# ----------------------------------------------------------------------
# targets

class PlasticTargets:
    """Per-triangle target forms and rotated mid-edge normals."""

    def __init__(self, abar_packed, bbar_packed, nbar):
        self.abar_packed = abar_packed
        self.bbar_packed = bbar_packed
        self.nbar = nbar

    @property
    def abar(self):
        return unpack_sym(self.abar_packed)

    @property
    def bbar(self):
        return unpack_sym(self.bbar_packed)


def plastic_first_form(atilde, S):
    """Target metric S^T atilde S for a single triangle (2x2 inputs)."""
    S = np.asarray(S, dtype=np.float64)
    return S.T @ np.asarray(atilde, dtype=np.float64) @ S


def rotated_mid_edge_normals(mesh, theta):
    """Mid-edge normals rebuilt from per-face rotated rest normals, (m, 3, 3)."""
    ntilde, _ = face_normals(mesh.rest_positions, mesh.triangles)
    w = np.einsum("mij,mj->mi", rodrigues(theta), ntilde)
    try:
        return average_edge_normals(w, mesh.neighbor_faces)
    except MeshError as exc:
        raise FieldError(f"rotated normals degenerate: {exc}") from None


def _raw_plastic_m(mesh, nbar, R):
    """The 2x2 matrices M[r][c] = (nbar_0 - nbar_{r+1}) . (R utilde_{c+1})."""
    p = mesh.rest_positions[mesh.triangles]
    ru1 = np.einsum("mij,mj->mi", R, p[:, 0] - p[:, 1])
    ru2 = np.einsum("mij,mj->mi", R, p[:, 0] - p[:, 2])
    d1 = nbar[:, 0] - nbar[:, 1]
    d2 = nbar[:, 0] - nbar[:, 2]
    M = np.empty((len(p), 2, 2))
    M[:, 0, 0] = np.einsum("mi,mi->m", d1, ru1)
    M[:, 0, 1] = np.einsum("mi,mi->m", d1, ru2)
    M[:, 1, 0] = np.einsum("mi,mi->m", d2, ru1)
    M[:, 1, 1] = np.einsum("mi,mi->m", d2, ru2)
    return M


def plastic_second_form(mesh, triangle, R, S, nbar):
    """Target curvature form of one triangle.

    Parameters
    ----------
    triangle : int
    R : (3, 3) rotation of this triangle
    S : (2, 2) symmetric stretch of this triangle
    nbar : (3, 3) rotated mid-edge normals of this triangle (rows are the
        normals opposite local vertices 0, 1, 2)

    Returns the symmetrized 2 S^T M S with
    M[r][c] = (nbar_0 - nbar_{r+1}) . (R (xtilde_0 - xtilde_{r...c+1})).
    """
    p = mesh.rest_positions[mesh.triangles[triangle]]
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    nbar = np.asarray(nbar, dtype=np.float64)
    u = np.stack([R @ (p[0] - p[1]), R @ (p[0] - p[2])])
    d = np.stack([nbar[0] - nbar[1], nbar[0] - nbar[2]])
    M = d @ u.T
    return S.T @ (M + M.T) @ S


def build_targets(mesh, field):
    """Assemble PlasticTargets for every triangle of the mesh."""
    if field.n_triangles != mesh.n_triangles:
        raise FieldError(
            f"field has {field.n_triangles} triangles, mesh has "
            f"{mesh.n_triangles}")
    bad = field_violations(field.theta, field.s)
    if len(bad):
        raise FieldError(
            f"triangle {int(bad[0])}: invalid plastic coordinates")
    S = mat_s(field.s)
    atilde = unpack_sym(first_forms(mesh.rest_positions, mesh.triangles))
    abar = np.einsum("mba,mbc,mcd->mad", S, atilde, S)

    R = rodrigues(field.theta)
    ntilde, _ = face_normals(mesh.rest_positions, mesh.triangles)
    w = np.einsum("mij,mj->mi", R, ntilde)
    try:
        nbar = average_edge_normals(w, mesh.neighbor_faces)
    except MeshError as exc:
        raise FieldError(f"rotated normals degenerate: {exc}") from None
    M = _raw_plastic_m(mesh, nbar, R)
    Ms = M + np.swapaxes(M, 1, 2)
    bbar = np.einsum("mba,mbc,mcd->mad", S, Ms, S)
    return PlasticTargets(pack_sym(abar), pack_sym(bbar), nbar)


# ----------------------------------------------------------------------
# derivative of the packed targets wrt the packed field

_E_BASIS = np.zeros((3, 2, 2))
_E_BASIS[0, 0, 0] = 1.0
_E_BASIS[1, 1, 1] = 1.0
_E_BASIS[2, 0, 1] = _E_BASIS[2, 1, 0] = 1.0


def _pack_cols(X):
    """(m, 2, 2, k) symmetric-in-first-two -> packed rows (m, 3, k)."""
    return np.stack([X[:, 0, 0], X[:, 1, 1], X[:, 0, 1]], axis=1)


def _sym_sandwich_jacobian(core, S):
    """d/ds_alpha of S^T core S for symmetric core: (m, 3, 3) packed."""
    X = np.einsum("abc,mcd,mde->mabe", _E_BASIS, core, S)  # (m, 3a, 2, 2)
    X = X + np.swapaxes(X, 2, 3)
    return np.stack([X[:, :, 0, 0], X[:, :, 1, 1], X[:, :, 0, 1]],
                    axis=1)                                # rows packed, cols alpha


def target_jacobian(mesh, field):
    """Sparse 6m x 6m derivative of packed targets wrt the packed field.

    Row layout per triangle: [abar00, abar11, abar01, bbar00, bbar11,
    bbar01]; column layout per triangle: [theta0..2, s0..2]. Rotations
    couple neighboring triangles through the shared mid-edge normals, so
    each triangle also contributes blocks into its neighbors' theta columns.
    """
    m = mesh.n_triangles
    S = mat_s(field.s)
    atilde = unpack_sym(first_forms(mesh.rest_positions, mesh.triangles))

    R = rodrigues(field.theta)
    Jl = rotation_left_jacobian(field.theta)
    ntilde, _ = face_normals(mesh.rest_positions, mesh.triangles)
    w = np.einsum("mij,mj->mi", R, ntilde)
    nbf = mesh.neighbor_faces
    v = w[:, None, :] + w[nbf]
    vn = np.linalg.norm(v, axis=2)
    if np.any(vn < 1e-8):
        t, l = np.argwhere(vn < 1e-8)[0]
        raise FieldError(
            f"triangle {int(t)}, edge {int(l)}: rotated normals degenerate")
    nbar = v / vn[:, :, None]
    Pm = ((np.eye(3) - np.einsum("mli,mlj->mlij", nbar, nbar))
          / vn[:, :, None, None])

    p = mesh.rest_positions[mesh.triangles]
    u1, u2 = p[:, 0] - p[:, 1], p[:, 0] - p[:, 2]
    ru1 = np.einsum("mij,mj->mi", R, u1)
    ru2 = np.einsum("mij,mj->mi", R, u2)
    Gn = -_skew(w) @ Jl                                    # d(R ntilde)/dtheta
    Gu1 = -_skew(ru1) @ Jl
    Gu2 = -_skew(ru2) @ Jl

    dn_own = np.einsum("mlij,mjk->mlik", Pm, Gn)
    dn_nb = np.einsum("mlij,mljk->mlik", Pm, Gn[nbf])
    interior = mesh.edge_adjacency >= 0                    # (m, 3)
    # boundary edges see the own face twice through the bisector
    dn_own_total = dn_own + np.where(interior[:, :, None, None], 0.0, dn_nb)

    d1 = nbar[:, 0] - nbar[:, 1]
    d2 = nbar[:, 0] - nbar[:, 2]
    M = np.empty((m, 2, 2))
    M[:, 0, 0] = np.einsum("mi,mi->m", d1, ru1)
    M[:, 0, 1] = np.einsum("mi,mi->m", d1, ru2)
    M[:, 1, 0] = np.einsum("mi,mi->m", d2, ru1)
    M[:, 1, 1] = np.einsum("mi,mi->m", d2, ru2)
    Ms = M + np.swapaxes(M, 1, 2)

    # own-theta derivative of M, (m, 2, 2, 3)
    dM = np.empty((m, 2, 2, 3))
    dd1 = dn_own_total[:, 0] - dn_own_total[:, 1]
    dd2 = dn_own_total[:, 0] - dn_own_total[:, 2]
    for r, (dd, d) in enumerate(((dd1, d1), (dd2, d2))):
        for c, (ru, Gu) in enumerate(((ru1, Gu1), (ru2, Gu2))):
            dM[:, r, c] = (np.einsum("mi,mik->mk", ru, dd)
                           + np.einsum("mi,mik->mk", d, Gu))
    dMs = dM + np.swapaxes(dM, 1, 2)
    db_dtheta = np.einsum("mba,mbck,mcd->madk", S, dMs, S)
    db_dtheta = _pack_cols(db_dtheta)                      # (m, 3, 3)

    da_ds = _sym_sandwich_jacobian(atilde, S)
    db_ds = _sym_sandwich_jacobian(Ms, S)

    diag = np.zeros((m, 6, 6))
    diag[:, 0:3, 3:6] = da_ds
    diag[:, 3:6, 0:3] = db_dtheta
    diag[:, 3:6, 3:6] = db_ds

    base = 6 * np.arange(m)
    rows = [np.broadcast_to((base[:, None] + np.arange(6))[:, :, None],
                            diag.shape).ravel()]
    cols = [np.broadcast_to((base[:, None] + np.arange(6))[:, None, :],
                            diag.shape).ravel()]
    vals = [diag.ravel()]

    # neighbor-theta blocks: edge l's normal feeds rows r with a sign
    sign = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])  # (edge, row)
    for l in range(3):
        sel = np.nonzero(interior[:, l])[0]
        if not len(sel):
            continue
        dn = dn_nb[sel, l]                                 # (k, 3, 3)
        dMn = np.zeros((len(sel), 2, 2, 3))
        for r in range(2):
            if sign[l, r] == 0.0:
                continue
            for c, ru in enumerate((ru1[sel], ru2[sel])):
                dMn[:, r, c] = sign[l, r] * np.einsum("mi,mik->mk", ru, dn)
        dMn = dMn + np.swapaxes(dMn, 1, 2)
        blk = np.einsum("mba,mbck,mcd->madk", S[sel], dMn, S[sel])
        blk = _pack_cols(blk)                              # (k, 3, 3)
        g = mesh.edge_adjacency[sel, l]
        rows.append(np.broadcast_to(
            (6 * sel[:, None] + 3 + np.arange(3))[:, :, None],
            blk.shape).ravel())
        cols.append(np.broadcast_to(
            (6 * g[:, None] + np.arange(3))[:, None, :], blk.shape).ravel())
        vals.append(blk.ravel())

    T = sparse.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(6 * m, 6 * m))
    return T.tocsr()
