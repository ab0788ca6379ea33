"""St. Venant-Kirchhoff discrete shell energy, elastic force and the
SPD-projected inexact Hessian.

Per triangle the energy is
    W = sqrt(det abar) * [ (h/8) * sv(abar^-1 a - I)
                         + (h^3/24) * sv(abar^-1 (bbar - b)) ]
with sv the quadratic material functional of sv_norm. Both strains are
quadratic forms in the packed form entries, so the force is assembled from
exact form Jacobians and the inexact Hessian is the Gauss-Newton part
(second derivatives of the forms, including all second-order normal
coupling, are dropped; first-order normal derivatives stay exact in the
gradient).
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .forms import first_forms, pack_sym, second_forms_from_normals
from .mesh import average_edge_normals, face_normals


class EnergyError(ValueError):
    """Raised for invalid material/target input (e.g. singular abar)."""


@dataclass
class MaterialParams:
    """Shell material: thickness h, Young's modulus E, Poisson ratio nu."""

    h: float
    E: float = 1.0
    nu: float = 0.3

    def __post_init__(self):
        if not self.h > 0:
            raise EnergyError(f"thickness must be positive, got {self.h}")
        if not self.E > 0:
            raise EnergyError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise EnergyError(f"Poisson ratio must be in (-1, 0.5), got {self.nu}")

    @property
    def c1(self):
        return self.E * self.nu / (1.0 - self.nu * self.nu)

    @property
    def c2(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @classmethod
    def default_for(cls, mesh, E=1.0, nu=0.3, h=None):
        """E = 1, nu = 0.3, h = 1% of the rest bounding-box diagonal."""
        if h is None:
            h = 0.01 * mesh.bbox_diagonal("rest")
        return cls(h=h, E=E, nu=nu)


@dataclass
class EnergyReport:
    total: float
    per_triangle: np.ndarray
    membrane: float
    bending: float


def sv_norm(M, c1, c2):
    """Material functional (c1/2)*tr(M)^2 + c2*tr(M @ M) of a 2x2 matrix."""
    M = np.asarray(M, dtype=np.float64)
    tr = M[0, 0] + M[1, 1]
    tr2 = M[0, 0] * M[0, 0] + 2.0 * M[0, 1] * M[1, 0] + M[1, 1] * M[1, 1]
    return 0.5 * c1 * tr * tr + c2 * tr2


def triangle_energy(a, b, abar, bbar, mat):
    """Energy of a single triangle from explicit 2x2 form matrices."""
    abar = np.asarray(abar, dtype=np.float64)
    det = abar[0, 0] * abar[1, 1] - abar[0, 1] * abar[1, 0]
    if det <= 0.0 or abar[0, 0] <= 0.0:
        raise EnergyError("target first form is not positive definite")
    inv = np.array([[abar[1, 1], -abar[0, 1]],
                    [-abar[1, 0], abar[0, 0]]]) / det
    sdet = np.sqrt(det)
    membrane = sv_norm(inv @ np.asarray(a) - np.eye(2), mat.c1, mat.c2)
    bending = sv_norm(inv @ (np.asarray(bbar) - np.asarray(b)), mat.c1, mat.c2)
    return sdet * (mat.h / 8.0 * membrane + mat.h ** 3 / 24.0 * bending)


# ----------------------------------------------------------------------
# batched assembly

def _packed_targets(targets, m):
    ap = getattr(targets, "abar_packed", None)
    bp = getattr(targets, "bbar_packed", None)
    if ap is None:
        ap = pack_sym(np.asarray(targets.abar))
    if bp is None:
        bp = pack_sym(np.asarray(targets.bbar))
    ap = np.asarray(ap, dtype=np.float64)
    bp = np.asarray(bp, dtype=np.float64)
    if ap.shape != (m, 3) or bp.shape != (m, 3):
        raise EnergyError(
            f"targets shaped {ap.shape}/{bp.shape}, expected ({m}, 3)")
    return ap, bp


@dataclass
class TargetForms:
    """Minimal per-triangle target container (packed (m, 3) arrays)."""

    abar_packed: np.ndarray
    bbar_packed: np.ndarray


def rest_targets(mesh):
    """Identity-plasticity targets: the rest forms themselves."""
    from .forms import rest_forms
    a, b = rest_forms(mesh)
    return TargetForms(a, b)


def _skew(v):
    """(..., 3) -> (..., 3, 3) cross-product matrices."""
    z = np.zeros(v.shape[:-1], dtype=v.dtype)
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


class _Assembly:
    """One-shot evaluation context for a fixed (positions, targets) pair.

    Quantities are computed lazily; the form Jacobians are shared by the
    force, the Gauss-Newton Hessian and the target-derivative blocks.
    """

    def __init__(self, mesh, targets, mat, state="current"):
        self.mesh = mesh
        self.mat = mat
        self.pos = mesh.positions(state)
        m = mesh.n_triangles
        self.ap, self.bp = _packed_targets(targets, m)
        self._geom = None
        self._jac = None
        self._coeff = None

    # -- geometry ------------------------------------------------------
    def geometry(self):
        if self._geom is not None:
            return self._geom
        mesh = self.mesh
        p = self.pos[mesh.triangles]                       # (m, 3, 3)
        n, two_area = face_normals(self.pos, mesh.triangles)
        edge_n = average_edge_normals(n, mesh.neighbor_faces)
        a = first_forms(self.pos, mesh.triangles)
        b = second_forms_from_normals(self.pos, mesh.triangles, edge_n)
        self._geom = dict(p=p, n=n, two_area=two_area, edge_n=edge_n,
                          a=a, b=b)
        return self._geom

    # -- material/strain coefficients ----------------------------------
    def coeffs(self):
        if self._coeff is not None:
            return self._coeff
        g = self.geometry()
        mat = self.mat
        ap, bp = self.ap, self.bp
        det = ap[:, 0] * ap[:, 1] - ap[:, 2] * ap[:, 2]
        bad = np.nonzero((det <= 0.0) | (ap[:, 0] <= 0.0))[0]
        if len(bad):
            raise EnergyError(
                f"triangle {int(bad[0])}: target first form not positive "
                "definite")
        A00 = ap[:, 1] / det
        A11 = ap[:, 0] / det
        A01 = -ap[:, 2] / det
        gtr = np.stack([A00, A11, 2.0 * A01], axis=1)
        Qq = np.empty((len(ap), 3, 3))
        Qq[:, 0, 0] = A00 * A00
        Qq[:, 1, 1] = A11 * A11
        Qq[:, 0, 1] = Qq[:, 1, 0] = A01 * A01
        Qq[:, 0, 2] = Qq[:, 2, 0] = 2.0 * A00 * A01
        Qq[:, 1, 2] = Qq[:, 2, 1] = 2.0 * A11 * A01
        Qq[:, 2, 2] = 2.0 * (A01 * A01 + A00 * A11)
        sdet = np.sqrt(det)
        km = (mat.h / 8.0) * sdet
        kb = (mat.h ** 3 / 24.0) * sdet
        cm = g["a"] - ap                                   # membrane strain
        cb = bp - g["b"]                                   # bending strain
        self._coeff = dict(A=np.stack([A00, A11, A01], axis=1), gtr=gtr,
                           Qq=Qq, km=km, kb=kb, cm=cm, cb=cb)
        return self._coeff

    def _sv(self, c, k):
        co = self.coeffs()
        c1, c2 = self.mat.c1, self.mat.c2
        lin = np.einsum("ma,ma->m", co["gtr"], c)
        quad = np.einsum("ma,mab,mb->m", c, co["Qq"], c)
        return k * (0.5 * c1 * lin * lin + c2 * quad)

    def _sv_grad(self, c, k):
        co = self.coeffs()
        c1, c2 = self.mat.c1, self.mat.c2
        lin = np.einsum("ma,ma->m", co["gtr"], c)
        return k[:, None] * (c1 * lin[:, None] * co["gtr"]
                             + 2.0 * c2 * np.einsum("mab,mb->ma", co["Qq"], c))

    def _sv_hess(self, k):
        co = self.coeffs()
        c1, c2 = self.mat.c1, self.mat.c2
        outer = np.einsum("ma,mb->mab", co["gtr"], co["gtr"])
        return k[:, None, None] * (c1 * outer + 2.0 * c2 * co["Qq"])

    # -- energies ------------------------------------------------------
    def energies(self):
        co = self.coeffs()
        return self._sv(co["cm"], co["km"]), self._sv(co["cb"], co["kb"])

    def report(self):
        em, eb = self.energies()
        per = em + eb
        return EnergyReport(total=float(per.sum()), per_triangle=per,
                            membrane=float(em.sum()), bending=float(eb.sum()))

    # -- form Jacobians wrt stencil positions --------------------------
    def jacobians(self):
        if self._jac is not None:
            return self._jac
        mesh = self.mesh
        g = self.geometry()
        m = mesh.n_triangles
        p, n, two_area = g["p"], g["n"], g["two_area"]
        edge_n = g["edge_n"]

        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        Ja = np.zeros((m, 3, 6, 3))
        Ja[:, 0, 0] = -2.0 * e1
        Ja[:, 0, 1] = 2.0 * e1
        Ja[:, 1, 0] = -2.0 * e2
        Ja[:, 1, 2] = 2.0 * e2
        Ja[:, 2, 0] = -(e1 + e2)
        Ja[:, 2, 1] = e2
        Ja[:, 2, 2] = e1

        # unit face normal derivative wrt each face vertex
        opp = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]            # opposite edges
        Pf = (np.eye(3) - np.einsum("mi,mj->mij", n, n)) / two_area[:, None, None]
        DN = np.matmul(Pf[:, None], _skew(opp))            # (m, 3vert, 3, 3)

        # mid-edge normal derivative wrt stencil slots
        nbf = mesh.neighbor_faces
        v = n[:, None, :] + n[nbf]
        vn = np.linalg.norm(v, axis=2)
        Pm = ((np.eye(3) - np.einsum("mli,mlj->mlij", edge_n, edge_n))
              / vn[:, :, None, None])
        DM = np.zeros((m, 3, 6, 3, 3))
        DM[:, :, :3] = np.matmul(Pm[:, :, None], DN[:, None])
        NB = np.matmul(Pm[:, :, None], DN[nbf])
        mi = np.arange(m)[:, None, None]
        li = np.arange(3)[None, :, None]
        # neighbor slots are distinct within each (face, edge) plane, so a
        # fancy += scatters without collisions
        DM[mi, li, mesh.neighbor_slots] += NB

        u1 = p[:, 0] - p[:, 1]
        u2 = p[:, 0] - p[:, 2]
        d1 = edge_n[:, 0] - edge_n[:, 1]
        d2 = edge_n[:, 0] - edge_n[:, 2]
        Dd1 = DM[:, 0] - DM[:, 1]                          # (m, 6, 3, 3)
        Dd2 = DM[:, 0] - DM[:, 2]

        JB = np.empty((m, 2, 2, 6, 3))
        for r, (Dd, d) in enumerate(((Dd1, d1), (Dd2, d2))):
            for c, u in enumerate((u1, u2)):
                t = np.einsum("mspq,mp->msq", Dd, u)
                t[:, 0] += d
                t[:, 1 + c] -= d
                JB[:, r, c] = t
        Jb = np.empty((m, 3, 6, 3))
        Jb[:, 0] = 2.0 * JB[:, 0, 0]
        Jb[:, 1] = 2.0 * JB[:, 1, 1]
        Jb[:, 2] = JB[:, 0, 1] + JB[:, 1, 0]
        self._jac = (Ja.reshape(m, 3, 18), Jb.reshape(m, 3, 18))
        return self._jac

    # -- assembled quantities -------------------------------------------
    def gradient(self):
        """Gradient of the total energy wrt positions, (3n,)."""
        co = self.coeffs()
        Ja, Jb = self.jacobians()
        Gm = self._sv_grad(co["cm"], co["km"])
        Gb = self._sv_grad(co["cb"], co["kb"])
        local = (np.einsum("ma,mas->ms", Gm, Ja)
                 - np.einsum("ma,mas->ms", Gb, Jb))
        f = np.zeros(3 * self.mesh.n_vertices)
        np.add.at(f, self.mesh.stencil_dofs, local)
        return f

    def local_hessians(self, project=True):
        """PSD per-stencil 18x18 blocks.

        The blocks are J^T H J with H the strain-space Hessians, which are
        positive semidefinite for nu in (-1, 0.5), so the eigenvalue clamp
        can only shave roundoff; project=False skips it for the solver hot
        path and yields the same matrix to machine precision.
        """
        co = self.coeffs()
        Ja, Jb = self.jacobians()
        Hm = self._sv_hess(co["km"])
        Hb = self._sv_hess(co["kb"])
        JaT = Ja.transpose(0, 2, 1)
        JbT = Jb.transpose(0, 2, 1)
        H = (np.matmul(JaT, np.matmul(Hm, Ja))
             + np.matmul(JbT, np.matmul(Hb, Jb)))
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        if not project:
            return H
        w, V = np.linalg.eigh(H)
        np.clip(w, 0.0, None, out=w)
        return np.einsum("msa,ma,mta->mst", V, w, V)

    def hessian(self, project=True):
        """Global sparse SPD Hessian, 3n x 3n."""
        H = self.local_hessians(project=project)
        mesh = self.mesh
        pattern = getattr(mesh, "_hessian_pattern", None)
        if pattern is None:
            dofs = mesh.stencil_dofs
            rows = np.broadcast_to(dofs[:, :, None],
                                   (len(dofs), 18, 18)).ravel()
            cols = np.broadcast_to(dofs[:, None, :],
                                   (len(dofs), 18, 18)).ravel()
            order = np.lexsort((cols, rows))
            rs, cs = rows[order], cols[order]
            first = np.ones(len(rs), dtype=bool)
            first[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            starts = np.flatnonzero(first)
            indices = cs[starts]
            nd = 3 * mesh.n_vertices
            indptr = np.searchsorted(rs[starts], np.arange(nd + 1))
            pattern = (order, starts, indices, indptr, nd)
            mesh._hessian_pattern = pattern
        order, starts, indices, indptr, nd = pattern
        data = np.add.reduceat(H.ravel()[order], starts)
        return sparse.csr_matrix((data, indices, indptr), shape=(nd, nd))

    def gradient_target_jacobian(self):
        """Sparse d(gradient)/d(packed targets), 3n x 6m.

        Target columns are per-triangle [abar00, abar11, abar01,
        bbar00, bbar11, bbar01].
        """
        co = self.coeffs()
        Ja, Jb = self.jacobians()
        mat = self.mat
        c1, c2 = mat.c1, mat.c2
        A00, A11, A01 = co["A"][:, 0], co["A"][:, 1], co["A"][:, 2]
        gtr, Qq, cm, cb = co["gtr"], co["Qq"], co["cm"], co["cb"]
        km, kb = co["km"], co["kb"]
        Gm = self._sv_grad(cm, km)
        Gb = self._sv_grad(cb, kb)
        m = self.mesh.n_triangles

        # dA = -(A E_alpha A) packed, and d(log sqrt det abar)
        dA = np.empty((3, m, 3))
        dA[0] = -np.stack([A00 * A00, A01 * A01, A00 * A01], axis=1)
        dA[1] = -np.stack([A01 * A01, A11 * A11, A01 * A11], axis=1)
        dA[2] = -np.stack([2 * A00 * A01, 2 * A01 * A11,
                           A00 * A11 + A01 * A01], axis=1)
        dk_rel = np.stack([0.5 * A00, 0.5 * A11, A01])     # (3, m)

        block = np.empty((m, 18, 6))
        for alpha in range(3):
            a0, a1, a01 = dA[alpha, :, 0], dA[alpha, :, 1], dA[alpha, :, 2]
            dg = np.stack([a0, a1, 2.0 * a01], axis=1)
            dQ = np.empty((m, 3, 3))
            dQ[:, 0, 0] = 2 * A00 * a0
            dQ[:, 1, 1] = 2 * A11 * a1
            dQ[:, 0, 1] = dQ[:, 1, 0] = 2 * A01 * a01
            dQ[:, 0, 2] = dQ[:, 2, 0] = 2 * (a0 * A01 + A00 * a01)
            dQ[:, 1, 2] = dQ[:, 2, 1] = 2 * (a1 * A01 + A11 * a01)
            dQ[:, 2, 2] = 2 * (2 * A01 * a01 + a0 * A11 + A00 * a1)
            dc = np.zeros((m, 3))
            dc[:, alpha] = -1.0                            # cm = a - abar
            lin_m = np.einsum("ma,ma->m", gtr, cm)
            lin_b = np.einsum("ma,ma->m", gtr, cb)
            dGm = (dk_rel[alpha][:, None] * Gm
                   + km[:, None] * (
                       c1 * (np.einsum("ma,ma->m", dg, cm)
                             + np.einsum("ma,ma->m", gtr, dc))[:, None] * gtr
                       + c1 * lin_m[:, None] * dg
                       + 2.0 * c2 * (np.einsum("mab,mb->ma", dQ, cm)
                                     + np.einsum("mab,mb->ma", Qq, dc))))
            dGb = (dk_rel[alpha][:, None] * Gb
                   + kb[:, None] * (
                       c1 * np.einsum("ma,ma->m", dg, cb)[:, None] * gtr
                       + c1 * lin_b[:, None] * dg
                       + 2.0 * c2 * np.einsum("mab,mb->ma", dQ, cb)))
            block[:, :, alpha] = (np.einsum("ma,mas->ms", dGm, Ja)
                                  - np.einsum("ma,mas->ms", dGb, Jb))

        Hb = self._sv_hess(kb)
        block[:, :, 3:] = -np.einsum("mas,mab->msb", Jb, Hb)

        dofs = self.mesh.stencil_dofs                      # (m, 18)
        rows = np.broadcast_to(dofs[:, :, None], block.shape)
        cols = np.broadcast_to(
            (6 * np.arange(m)[:, None] + np.arange(6))[:, None, :],
            block.shape)
        out = sparse.coo_matrix(
            (block.ravel(), (rows.ravel(), cols.ravel())),
            shape=(3 * self.mesh.n_vertices, 6 * m))
        return out.tocsr()


# ----------------------------------------------------------------------
# public wrappers

def total_energy(mesh, targets, mat, state="current"):
    """EnergyReport over all triangles at the given position state."""
    return _Assembly(mesh, targets, mat, state).report()


def elastic_force(mesh, targets, mat, state="current"):
    """Elastic force dE/dx, flat (3n,).

    The force balance and all consumers state equilibrium directly on this
    gradient, so no sign is flipped here.
    """
    return _Assembly(mesh, targets, mat, state).gradient()


def elastic_hessian_spd(mesh, targets, mat, state="current"):
    """Sparse symmetric PSD Gauss-Newton Hessian, 3n x 3n."""
    return _Assembly(mesh, targets, mat, state).hessian()


def force_target_jacobian(mesh, targets, mat, state="current"):
    """Sparse derivative of the elastic force wrt packed targets, 3n x 6m."""
    return _Assembly(mesh, targets, mat, state).gradient_target_jacobian()
