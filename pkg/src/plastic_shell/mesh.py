"""Triangle surface mesh container, OBJ I/O and mid-edge normals."""

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components


class MeshError(ValueError):
    """Raised for invalid mesh input: parse failures, non-manifold or
    degenerate connectivity, bad state requests."""


def _as_positions(arr, name):
    pos = np.asarray(arr, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise MeshError(f"{name} must be (n, 3), got {pos.shape}")
    if not np.all(np.isfinite(pos)):
        raise MeshError(f"{name} contains non-finite values")
    return pos


class TriangleMesh:
    """Manifold triangle mesh carrying a rest state and a current state.

    Parameters
    ----------
    rest_positions : (n, 3) array_like
        Undeformed vertex positions.
    triangles : (m, 3) array_like of int
        Vertex indices, counterclockwise. Orientation must be consistent
        across shared edges and every edge may border at most two triangles.
    current_positions : (n, 3) array_like, optional
        Deformed vertex positions; defaults to a copy of the rest state.

    Attributes
    ----------
    edge_adjacency : (m, 3) int array
        ``edge_adjacency[t, l]`` is the triangle sharing the edge opposite
        local vertex ``l`` of triangle ``t``, or -1 on the boundary.
    wing_vertices : (m, 3) int array
        The vertex of that neighbor not on the shared edge, or -1.
    """

    def __init__(self, rest_positions, triangles, current_positions=None):
        self.rest_positions = _as_positions(rest_positions, "rest_positions")
        tris = np.asarray(triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must be (m, 3), got {tris.shape}")
        n = len(self.rest_positions)
        if tris.size and (tris.min() < 0 or tris.max() >= n):
            raise MeshError("triangle index out of range")
        if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2])
                  | (tris[:, 0] == tris[:, 2])):
            t = int(np.nonzero((tris[:, 0] == tris[:, 1])
                               | (tris[:, 1] == tris[:, 2])
                               | (tris[:, 0] == tris[:, 2]))[0][0])
            raise MeshError(f"triangle {t} repeats a vertex")
        self.triangles = tris
        if current_positions is None:
            self.current_positions = self.rest_positions.copy()
        else:
            self.current_positions = _as_positions(current_positions,
                                                   "current_positions")
            if self.current_positions.shape != self.rest_positions.shape:
                raise MeshError("current/rest vertex counts differ")
        self._build_topology()
        self.validate_rest()

    # ------------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.rest_positions)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def boundary_edges(self):
        """(k, 2) array of vertex pairs with exactly one incident triangle."""
        return self._boundary_edges

    def positions(self, state="current"):
        """Resolve a state name ("rest" or "current") or explicit array."""
        if isinstance(state, str):
            if state == "rest":
                return self.rest_positions
            if state == "current":
                return self.current_positions
            raise MeshError(f"unknown state {state!r}")
        return _as_positions(state, "positions")

    def bbox_diagonal(self, state="rest"):
        pos = self.positions(state)
        return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))

    def face_areas(self, state="current"):
        pos = self.positions(state)
        p = pos[self.triangles]
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def copy(self):
        return TriangleMesh(self.rest_positions.copy(), self.triangles.copy(),
                            self.current_positions.copy())

    def vertex_components(self):
        """Connected-component label per vertex."""
        if self._components is None:
            i = np.concatenate([self.triangles[:, 0], self.triangles[:, 1],
                                self.triangles[:, 2]])
            j = np.concatenate([self.triangles[:, 1], self.triangles[:, 2],
                                self.triangles[:, 0]])
            adj = sparse.coo_matrix(
                (np.ones(len(i)), (i, j)),
                shape=(self.n_vertices, self.n_vertices))
            self._components = connected_components(adj, directed=False)[1]
        return self._components

    def validate_rest(self):
        """Reject rest states with (near-)degenerate triangles."""
        diag = self.bbox_diagonal("rest")
        areas = self.face_areas("rest")
        floor = 1e-12 * diag * diag
        bad = np.nonzero(areas <= floor)[0]
        if len(bad):
            raise MeshError(
                f"triangle {int(bad[0])}: rest area {areas[bad[0]]:.3e} "
                f"below degeneracy floor {floor:.3e}")

    # ------------------------------------------------------------------
    def _build_topology(self):
        tris = self.triangles
        m = len(tris)
        edges = {}
        for t in range(m):
            i, j, k = tris[t]
            for l, (a, b) in enumerate(((j, k), (k, i), (i, j))):
                key = (a, b) if a < b else (b, a)
                edges.setdefault(key, []).append((t, l, a < b))
        adjacency = np.full((m, 3), -1, dtype=np.int64)
        wing = np.full((m, 3), -1, dtype=np.int64)
        boundary = []
        for key, inc in edges.items():
            if len(inc) > 2:
                raise MeshError(
                    f"non-manifold edge {key}: {len(inc)} incident triangles")
            if len(inc) == 1:
                boundary.append(key)
                continue
            (t1, l1, f1), (t2, l2, f2) = inc
            if f1 == f2:
                raise MeshError(
                    f"inconsistent orientation across edge {key} "
                    f"(triangles {t1} and {t2})")
            adjacency[t1, l1] = t2
            adjacency[t2, l2] = t1
            a, b = key
            wing[t1, l1] = int(tris[t2].sum() - a - b)
            wing[t2, l2] = int(tris[t1].sum() - a - b)
        self.edge_adjacency = adjacency
        self.wing_vertices = wing
        self._boundary_edges = (np.array(sorted(boundary), dtype=np.int64)
                                if boundary else np.zeros((0, 2), np.int64))
        self._components = None

        # neighbor face with boundary edges pointing back at the owner, so
        # averaging face normals across an edge degenerates gracefully there
        nbf = adjacency.copy()
        own = np.arange(m)[:, None]
        nbf[nbf < 0] = np.broadcast_to(own, nbf.shape)[nbf < 0]
        self.neighbor_faces = nbf

        # energy stencil: slots 0..2 own vertices, slot 3+l the wing across
        # edge l; absent wings map to vertex 0 with contributions kept at zero
        stencil = np.concatenate([tris, wing], axis=1)
        self.stencil_mask = stencil >= 0
        self.stencil = np.where(stencil >= 0, stencil, 0)

        # for edge l, local vertex c of the neighbor -> stencil slot of t
        nb_slot = np.empty((m, 3, 3), dtype=np.int64)
        nb_tris = tris[nbf]                      # (m, 3, 3) vertex ids
        for c in range(3):
            v = nb_tris[:, :, c]                 # (m, 3)
            slot = np.full((m, 3), -1, dtype=np.int64)
            for own_slot in range(3):
                slot[v == tris[:, own_slot][:, None]] = own_slot
            is_wing = slot < 0
            slot[is_wing] = 3 + np.nonzero(is_wing)[1]
            nb_slot[:, :, c] = slot
        self.neighbor_slots = nb_slot

        # flat dof ids of the stencil, (m, 18)
        self.stencil_dofs = (3 * self.stencil[:, :, None]
                             + np.arange(3)).reshape(m, 18)


def face_normals(positions, triangles):
    """Unit face normals and the corresponding cross-product norms.

    Returns
    -------
    normals : (m, 3) array
    two_areas : (m,) array
        Norm of the edge cross product, twice the triangle area.
    """
    p = positions[triangles]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    two_areas = np.linalg.norm(cr, axis=1)
    if np.any(two_areas == 0.0):
        t = int(np.nonzero(two_areas == 0.0)[0][0])
        raise MeshError(f"triangle {t}: zero area, normal undefined")
    return cr / two_areas[:, None], two_areas


def average_edge_normals(unit_normals, neighbor_faces):
    """Normalize the per-edge sum of the two incident face normals.

    Boundary edges (neighbor pointing back at the owner) reduce to the face
    normal itself. Nearly anti-parallel pairs have no well defined bisector.
    """
    v = unit_normals[:, None, :] + unit_normals[neighbor_faces]
    vn = np.linalg.norm(v, axis=2)
    if np.any(vn < 1e-8):
        t, l = np.argwhere(vn < 1e-8)[0]
        raise MeshError(
            f"triangle {int(t)}, edge {int(l)}: incident face normals are "
            "anti-parallel, mid-edge normal undefined")
    return v / vn[:, :, None]


def mid_edge_normals(mesh, state="current"):
    """Per-triangle mid-edge unit normals.

    Entry ``[t, l]`` is the normal attached to the edge of triangle ``t``
    opposite its local vertex ``l``: the normalized sum of the two incident
    face normals, or the face normal itself on the boundary.

    Parameters
    ----------
    mesh : TriangleMesh
    state : str or (n, 3) array
        Which positions to evaluate at.

    Returns
    -------
    (m, 3, 3) array
    """
    pos = mesh.positions(state)
    n, _ = face_normals(pos, mesh.triangles)
    return average_edge_normals(n, mesh.neighbor_faces)


# ----------------------------------------------------------------------
# Wavefront OBJ I/O. Only v/f records are interpreted; faces with more
# than three vertices are fan-triangulated as (0, i, i+1).

def load_obj(path):
    """Read an OBJ file into a TriangleMesh (rest = current = file data)."""
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            tag = fields[0]
            if tag == "v":
                if len(fields) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex record")
                try:
                    verts.append([float(x) for x in fields[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: {exc}") from None
            elif tag == "f":
                if len(fields) < 4:
                    raise MeshError(
                        f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for part in fields[1:]:
                    head = part.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshError(
                            f"{path}:{lineno}: bad face index {part!r}"
                        ) from None
                    if i <= 0:
                        raise MeshError(
                            f"{path}:{lineno}: face indices must be positive "
                            "and 1-based")
                    idx.append(i - 1)
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[a], idx[a + 1]])
            # all other records are ignored
    if not verts or not faces:
        raise MeshError(f"{path}: no triangles found")
    try:
        return TriangleMesh(np.array(verts), np.array(faces))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_obj(mesh, path, state="current"):
    """Write vertices and faces; 17 significant digits, 1-based indices."""
    pos = mesh.positions(state)
    lines = []
    for x, y, z in pos:
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for i, j, k in mesh.triangles:
        lines.append(f"f {i + 1} {j + 1} {k + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
