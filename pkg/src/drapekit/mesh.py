"""Triangle meshes, geometric reductions, OBJ I/O and two-sided garment meshes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import shapely
from scipy.spatial import Delaunay, cKDTree

from .errors import InvalidContour, InvalidMesh, ParseError

#: triangles below this area (m^2) are rejected at construction
DEGENERATE_AREA = 1e-12


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions in meters.
    triangles : array_like, shape (m, 3)
        Vertex indices per triangle.
    anchors : dict
        Labeled anchor points, ``label -> vertex index``.
    uv : array_like, shape (n, 2), optional
        Rest-state parameter coordinates per vertex.
    check : bool
        Reject degenerate triangles. Deformed copies produced by the
        simulator and the optimizers skip this check.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    anchors: dict = field(default_factory=dict)
    uv: np.ndarray | None = None
    check: bool = True

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        t = _frozen(self.triangles, np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "anchors", {str(k): int(i) for k, i in self.anchors.items()})
        if self.uv is not None:
            object.__setattr__(self, "uv", _frozen(self.uv, np.float64).reshape(-1, 2))
            if len(self.uv) != len(v):
                raise InvalidMesh("uv count does not match vertex count")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidMesh("triangle index out of range")
        for label, i in self.anchors.items():
            if not 0 <= i < len(v):
                raise InvalidMesh(f"anchor {label!r} references missing vertex {i}")
        if self.check and len(t):
            bad = np.flatnonzero(self.areas <= DEGENERATE_AREA)
            if len(bad):
                raise InvalidMesh(f"{len(bad)} degenerate triangle(s), first is #{bad[0]}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def areas(self):
        return triangle_areas(self.vertices, self.triangles)

    @cached_property
    def barycenters(self):
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def edges(self):
        """Unique undirected edges, sorted vertex pairs, shape (e, 2)."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def with_vertices(self, vertices, check=False):
        """Copy sharing connectivity, anchors and uv with new positions."""
        return TriMesh(vertices, self.triangles, self.anchors, self.uv, check=check)

    def transformed(self, rotation=None, translation=None, scale=1.0):
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return self.with_vertices(v)

    def anchor_points(self):
        return {k: self.vertices[i].copy() for k, i in self.anchors.items()}

    def total_area(self):
        return float(self.areas.sum())

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def is_closed_manifold(self):
        """True when every undirected edge is shared by exactly two triangles."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def is_consistently_oriented(self):
        d = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        _, counts = np.unique(d, axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def euler_characteristic(self):
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges) + len(self.triangles))


def triangle_areas(vertices, triangles):
    p = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def _area_weights(mesh):
    if mesh.n_triangles == 0:
        raise InvalidMesh("mesh has no triangles")
    a = mesh.areas
    total = a.sum()
    if not total > 0:
        raise InvalidMesh("mesh has zero total area")
    return a, total


def area_weighted_center(mesh):
    """Return ``sum(a_i g_i) / sum(a_i)`` over the triangles of `mesh`."""
    a, total = _area_weights(mesh)
    return (a[:, None] * mesh.barycenters).sum(axis=0) / total


def representative_size(mesh):
    """Area-weighted mean distance of triangle barycenters from the center."""
    a, total = _area_weights(mesh)
    c = (a[:, None] * mesh.barycenters).sum(axis=0) / total
    return float((a * np.linalg.norm(mesh.barycenters - c, axis=1)).sum() / total)


# --------------------------------------------------------------------------
# contours and two-sided garment meshes


@dataclass(frozen=True, eq=False)
class Contour2D:
    """Closed simple polygon, stored counter-clockwise.

    Clockwise input is reversed; self-intersecting input raises
    :class:`InvalidContour`.
    """

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(p) > 1 and np.allclose(p[0], p[-1]):
            p = p[:-1]
        if len(p) < 3:
            raise InvalidContour("contour needs at least three points")
        if not shapely.LinearRing(p).is_simple:
            raise InvalidContour("contour self-intersects")
        if polygon_area(p) < 0:
            p = p[::-1]
        object.__setattr__(self, "points", _frozen(p, np.float64))

    @property
    def area(self):
        return polygon_area(self.points)

    def polygon(self):
        return shapely.Polygon(self.points)


def polygon_area(points):
    """Signed shoelace area, positive for counter-clockwise polygons."""
    x, y = np.asarray(points, dtype=float).T
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _resample_boundary(points, spacing):
    out = []
    for a, b in zip(points, np.roll(points, -1, axis=0)):
        k = max(1, math.ceil(np.linalg.norm(b - a) / spacing - 1e-9))
        for s in range(k):
            out.append(a + (b - a) * (s / k))
    return np.array(out)


def _interior_points(poly, spacing, rng, jitter=0.1):
    x0, y0, x1, y1 = poly.bounds
    xs = np.arange(x0 + 0.5 * spacing, x1, spacing)
    ys = np.arange(y0 + 0.5 * spacing, y1, spacing)
    if not len(xs) or not len(ys):
        return np.empty((0, 2))
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts + rng.uniform(-jitter, jitter, size=pts.shape) * spacing
    inside = shapely.contains_xy(poly, pts[:, 0], pts[:, 1])
    pts = pts[inside]
    d = shapely.distance(poly.exterior, shapely.points(pts))
    return pts[d >= 0.5 * spacing]


def _conform(boundary, interior):
    """Split boundary segments and drop interior points until every segment is Gabriel."""
    boundary = [np.asarray(p) for p in boundary]
    for _ in range(64):
        b = np.array(boundary)
        allp = np.vstack([b, interior]) if len(interior) else b
        tree = cKDTree(allp)
        nb = len(b)
        mids = 0.5 * (b + np.roll(b, -1, axis=0))
        radii = 0.5 * np.linalg.norm(np.roll(b, -1, axis=0) - b, axis=1)
        drop = set()
        split = []
        for i, (m, r) in enumerate(zip(mids, radii)):
            for j in tree.query_ball_point(m, r * (1 - 1e-9)):
                if j == i or j == (i + 1) % nb:
                    continue
                if j >= nb:
                    drop.add(j - nb)
                else:
                    split.append(i)
                    break
        if drop:
            keep = np.setdiff1d(np.arange(len(interior)), sorted(drop))
            interior = interior[keep]
        if not split:
            if not drop:
                return np.array(boundary), interior
            continue
        for i in sorted(set(split), reverse=True):
            boundary.insert(i + 1, 0.5 * (boundary[i] + boundary[(i + 1) % len(boundary)]))
    raise InvalidContour("could not build a conforming triangulation of the contour")


def triangulate_contour(contour, target_edge_len, seed=0):
    """Flat one-sided triangulation of a contour.

    Returns ``(points2d, triangles, n_boundary)``; the first `n_boundary`
    points are the (resampled) contour in counter-clockwise order and
    include every input contour point.
    """
    if not target_edge_len > 0:
        raise InvalidContour("target_edge_len must be positive")
    if not isinstance(contour, Contour2D):
        contour = Contour2D(contour)
    poly = contour.polygon()
    rng = np.random.default_rng(seed)
    boundary = _resample_boundary(contour.points, target_edge_len)
    interior = _interior_points(poly, target_edge_len, rng)
    boundary, interior = _conform(boundary, interior)
    pts = np.vstack([boundary, interior]) if len(interior) else boundary
    tri = Delaunay(pts).simplices
    c = pts[tri].mean(axis=1)
    keep = shapely.contains_xy(poly, c[:, 0], c[:, 1])
    tri = tri[keep]
    p = pts[tri]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    tri = tri[np.abs(cross) > 2 * DEGENERATE_AREA]
    cross = cross[np.abs(cross) > 2 * DEGENERATE_AREA]
    tri[cross < 0] = tri[cross < 0][:, ::-1]
    nb = len(boundary)
    directed = {tuple(e) for e in tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)}
    for i in range(nb):
        if (i, (i + 1) % nb) not in directed:
            raise InvalidContour(f"boundary segment {i} missing from triangulation")
    return pts, tri, nb


def mesh_from_contour(contour, target_edge_len, anchors=None, seed=0, offset=None):
    """Closed two-sided garment mesh from a 2D outline.

    The flat triangulation is placed at ``z = 0`` (bottom layer, facing
    down) and mirrored to ``z = offset`` (top layer, facing up); the two
    contours are stitched by a strip of triangles. `offset` defaults to
    ``1e-3`` times the contour bounding-box diagonal.

    `anchors` maps labels to 2D points; each is attached to the nearest
    top-layer contour vertex.
    """
    if not isinstance(contour, Contour2D):
        contour = Contour2D(contour)
    pts, tri, nb = triangulate_contour(contour, target_edge_len, seed)
    n = len(pts)
    if offset is None:
        lo, hi = contour.points.min(axis=0), contour.points.max(axis=0)
        offset = 1e-3 * float(np.linalg.norm(hi - lo))
    bottom = np.column_stack([pts, np.zeros(n)])
    top = np.column_stack([pts, np.full(n, offset)])
    i = np.arange(nb)
    j = (i + 1) % nb
    strip = np.vstack(
        [np.column_stack([i, j, j + n]), np.column_stack([i, j + n, i + n])]
    )
    triangles = np.vstack([tri[:, ::-1], tri + n, strip])
    labeled = {}
    if anchors:
        tree = cKDTree(pts[:nb])
        for label, p in anchors.items():
            _, k = tree.query(np.asarray(p, dtype=float)[:2])
            labeled[label] = int(k) + n
    return TriMesh(np.vstack([bottom, top]), triangles, labeled, uv=np.vstack([pts, pts]))


def layer_twins(mesh, tol=1e-9):
    """Vertex pairs ``(i, i + n/2)`` of a two-sided mesh built by
    :func:`mesh_from_contour`, or an empty array when the layout differs.

    The two halves must be translates of each other by one common offset.
    """
    v = np.asarray(mesh.vertices, float)
    n = len(v)
    if n < 2 or n % 2:
        return np.zeros((0, 2), np.int64)
    k = n // 2
    d = v[k:] - v[:k]
    scale = max(float(np.ptp(v)), 1e-12)
    if np.linalg.norm(d[0]) <= tol * scale or np.abs(d - d[0]).max() > tol * scale:
        return np.zeros((0, 2), np.int64)
    return np.column_stack([np.arange(k), np.arange(k, n)]).astype(np.int64)


# --------------------------------------------------------------------------
# Wavefront OBJ


def _obj_index(token, count, lineno):
    try:
        k = int(token)
    except ValueError:
        raise ParseError(f"bad index {token!r}", lineno) from None
    if k == 0:
        raise ParseError("index 0 is invalid (OBJ indices are 1-based)", lineno)
    k = k - 1 if k > 0 else count + k
    if not 0 <= k < count:
        raise ParseError(f"index {token} out of range", lineno)
    return k


def load_obj(path, anchors=None):
    """Read an ASCII OBJ; polygons are fan-triangulated.

    Anchors come from `anchors` (a dict or a JSON path) or from the
    ``<stem>.anchors.json`` sidecar when present.
    """
    path = Path(path)
    verts, uvs, faces, face_uv = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag, args = parts[0], parts[1:]
            if tag == "v":
                if len(args) < 3:
                    raise ParseError("vertex needs three coordinates", lineno)
                try:
                    verts.append([float(a) for a in args[:3]])
                except ValueError:
                    raise ParseError("bad vertex coordinate", lineno) from None
            elif tag == "vt":
                try:
                    uvs.append([float(a) for a in args[:2]])
                except ValueError:
                    raise ParseError("bad texture coordinate", lineno) from None
            elif tag == "f":
                if len(args) < 3:
                    raise ParseError("face needs at least three vertices", lineno)
                vi, ti = [], []
                for a in args:
                    fields = a.split("/")
                    vi.append(_obj_index(fields[0], len(verts), lineno))
                    if len(fields) > 1 and fields[1]:
                        ti.append(_obj_index(fields[1], len(uvs), lineno))
                for k in range(1, len(vi) - 1):
                    faces.append([vi[0], vi[k], vi[k + 1]])
                    if len(ti) == len(vi):
                        face_uv.append([ti[0], ti[k], ti[k + 1]])
    uv = None
    if uvs and len(face_uv) == len(faces):
        uv = np.zeros((len(verts), 2))
        uvs = np.asarray(uvs)
        for f, t in zip(faces, face_uv):
            uv[f] = uvs[t]
    if anchors is None:
        side = path.with_name(path.stem + ".anchors.json")
        anchors = load_anchors(side) if side.exists() else {}
    elif not isinstance(anchors, dict):
        anchors = load_anchors(anchors)
    return TriMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces).reshape(-1, 3), anchors, uv)


def save_obj(mesh, path, sidecar=True):
    """Write `mesh` as OBJ; anchors go to the ``<stem>.anchors.json`` sidecar."""
    path = Path(path)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uv is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uv.tolist()]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (mesh.triangles + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (mesh.triangles + 1).tolist()]
    path.write_text("\n".join(lines) + "\n")
    if sidecar and mesh.anchors:
        save_anchors(mesh.anchors, path.with_name(path.stem + ".anchors.json"))


def load_anchors(path):
    with open(path) as fh:
        data = json.load(fh)
    return {str(k): int(v) for k, v in data.items()}


def save_anchors(anchors, path):
    Path(path).write_text(json.dumps(dict(sorted(anchors.items())), indent=1) + "\n")
