"""Primitive meshes used by tests, demos and fixtures."""

import numpy as np

from .mesh import TriMesh


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    t = (1 + 5**0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius + np.asarray(center), np.array(faces))


def box(lo, hi, divisions=1):
    """Closed axis-aligned box, each face split into ``divisions**2`` quads."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = divisions
    verts, faces, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    s = np.linspace(0.0, 1.0, n + 1)
    for axis in range(3):
        u, w = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, 1):
            for i in range(n):
                for j in range(n):
                    quad = []
                    for a, b in ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)):
                        p = np.empty(3)
                        p[axis] = hi[axis] if side else lo[axis]
                        p[u] = lo[u] + s[a] * (hi[u] - lo[u])
                        p[w] = lo[w] + s[b] * (hi[w] - lo[w])
                        quad.append(vid(p))
                    if not side:
                        quad = quad[::-1]
                    faces += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
    return TriMesh(np.array(verts), np.array(faces))


def cylinder(radius, z0, z1, segments=32, rings=4, center=(0.0, 0.0)):
    """Closed vertical cylinder with fan-triangulated caps."""
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    zs = np.linspace(z0, z1, rings + 1)
    verts = [(center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), z) for z in zs for a in ang]
    faces = []
    for r in range(rings):
        for s in range(segments):
            a, b = r * segments + s, r * segments + (s + 1) % segments
            c, d = a + segments, b + segments
            faces += [(a, b, d), (a, d, c)]
    bot, top = len(verts), len(verts) + 1
    verts += [(center[0], center[1], z0), (center[0], center[1], z1)]
    for s in range(segments):
        faces.append((bot, (s + 1) % segments, s))
        faces.append((top, rings * segments + s, rings * segments + (s + 1) % segments))
    return TriMesh(np.array(verts), np.array(faces))


def grid_sheet(width, height, nx, ny, z=0.0):
    """Open flat rectangular sheet in the ``z`` plane, ``nx * ny`` vertices."""
    xs, ys = np.linspace(0, width, nx), np.linspace(0, height, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.full(nx * ny, z)])
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b, c, d = i * ny + j, (i + 1) * ny + j, (i + 1) * ny + j + 1, i * ny + j + 1
            if (i + j) % 2:
                faces += [(a, b, c), (a, c, d)]
            else:
                faces += [(a, b, d), (b, c, d)]
    uv = verts[:, :2].copy()
    return TriMesh(verts, np.array(faces), uv=uv)
