"""Deterministic benchmark mesh generators (plane grid, sphere, cylinder,
torus). Also runnable as ``python -m plastic_shell.fixtures`` to write OBJs."""

import argparse

import numpy as np

from .mesh import TriangleMesh, save_obj


def plane_grid(nx=10, ny=10, size=1.0):
    """Regular grid in the z = 0 plane with 2*nx*ny triangles.

    Vertices run row-major over (nx+1) x (ny+1) samples of a size x size
    square; each cell splits along its diagonal into two CCW (+z) triangles.
    """
    xs = np.linspace(0.0, size, nx + 1)
    ys = np.linspace(0.0, size, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            faces.append([v00, v10, v11])
            faces.append([v00, v11, v01])
    return TriangleMesh(verts, np.array(faces))


_ICO_VERTS = None
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def _icosahedron():
    global _ICO_VERTS
    if _ICO_VERTS is None:
        p = (1.0 + np.sqrt(5.0)) / 2.0
        v = np.array([
            (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
            (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
            (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
        ], dtype=np.float64)
        _ICO_VERTS = v / np.linalg.norm(v, axis=1)[:, None]
    return _ICO_VERTS.copy(), np.array(_ICO_FACES, dtype=np.int64)


def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron projected onto a sphere.

    Three subdivisions give the 642-vertex / 1280-triangle benchmark sphere.
    """
    verts, faces = _icosahedron()
    verts = list(verts)
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            p = verts[a] + verts[b]
            verts.append(p / np.linalg.norm(p))
            midpoint[key] = len(verts) - 1
        return midpoint[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(radius * np.array(verts), faces)


def cylinder(n_around=32, n_axial=12, radius=0.5, length=2.0):
    """Open tube along the x axis with outward normals.

    (n_axial + 1) rings of n_around vertices; both end rings are boundary.
    """
    phis = 2.0 * np.pi * np.arange(n_around) / n_around
    xs = np.linspace(-length / 2.0, length / 2.0, n_axial + 1)
    verts = np.empty(((n_axial + 1) * n_around, 3))
    for a, x in enumerate(xs):
        base = a * n_around
        verts[base:base + n_around, 0] = x
        verts[base:base + n_around, 1] = radius * np.cos(phis)
        verts[base:base + n_around, 2] = radius * np.sin(phis)

    def vid(a, c):
        return a * n_around + (c % n_around)

    faces = []
    for a in range(n_axial):
        for c in range(n_around):
            A, B = vid(a, c), vid(a + 1, c)
            C, D = vid(a + 1, c + 1), vid(a, c + 1)
            faces.append([A, D, C])
            faces.append([A, C, B])
    return TriangleMesh(verts, np.array(faces))


def torus(n_major=24, n_minor=12, major_radius=1.0, minor_radius=0.3):
    """Closed torus around the z axis with outward normals."""
    us = 2.0 * np.pi * np.arange(n_major) / n_major
    vs = 2.0 * np.pi * np.arange(n_minor) / n_minor
    verts = np.empty((n_major * n_minor, 3))
    for i, u in enumerate(us):
        ring = major_radius + minor_radius * np.cos(vs)
        base = i * n_minor
        verts[base:base + n_minor, 0] = ring * np.cos(u)
        verts[base:base + n_minor, 1] = ring * np.sin(u)
        verts[base:base + n_minor, 2] = minor_radius * np.sin(vs)

    def vid(i, j):
        return (i % n_major) * n_minor + (j % n_minor)

    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            A, B = vid(i, j), vid(i + 1, j)
            C, D = vid(i + 1, j + 1), vid(i, j + 1)
            faces.append([A, B, C])
            faces.append([A, C, D])
    return TriangleMesh(verts, np.array(faces))


def main(argv=None):
    ap = argparse.ArgumentParser(
        description="write a benchmark fixture mesh as OBJ")
    sub = ap.add_subparsers(dest="shape", required=True)
    g = sub.add_parser("plane")
    g.add_argument("--nx", type=int, default=10)
    g.add_argument("--ny", type=int, default=10)
    g.add_argument("--size", type=float, default=1.0)
    s = sub.add_parser("sphere")
    s.add_argument("--subdivisions", type=int, default=3)
    s.add_argument("--radius", type=float, default=1.0)
    c = sub.add_parser("cylinder")
    c.add_argument("--n-around", type=int, default=32)
    c.add_argument("--n-axial", type=int, default=12)
    c.add_argument("--radius", type=float, default=0.5)
    c.add_argument("--length", type=float, default=2.0)
    t = sub.add_parser("torus")
    t.add_argument("--n-major", type=int, default=24)
    t.add_argument("--n-minor", type=int, default=12)
    t.add_argument("--major-radius", type=float, default=1.0)
    t.add_argument("--minor-radius", type=float, default=0.3)
    for p in (g, s, c, t):
        p.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    if args.shape == "plane":
        mesh = plane_grid(args.nx, args.ny, args.size)
    elif args.shape == "sphere":
        mesh = icosphere(args.subdivisions, args.radius)
    elif args.shape == "cylinder":
        mesh = cylinder(args.n_around, args.n_axial, args.radius, args.length)
    else:
        mesh = torus(args.n_major, args.n_minor, args.major_radius,
                     args.minor_radius)
    save_obj(mesh, args.out, state="rest")
    print(f"{args.out}: {mesh.n_vertices} vertices, "
          f"{mesh.n_triangles} triangles")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
