"""Voxel distance fields with stored closest points.

Nodes within a narrow band of the surface are seeded with exact
point-triangle distances; the rest of the grid is filled by fast sweeping
that propagates the closest *triangle* between neighbouring nodes, so every
stored pair ``(closest_point, distance)`` is an exact point-triangle
evaluation. Queries look only at the eight nodes around the query point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .errors import NotWatertight, OutOfBounds

#: voxels per meter used when no grid is given
DEFAULT_RESOLUTION = 384.0
NARROW_BAND = 2
SWEEP_TOL = 1e-6


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    resolution: float
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def spacing(self):
        return 1.0 / self.resolution

    @property
    def upper(self):
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * self.spacing

    def node_positions(self, index):
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * self.spacing

    def contains(self, points, tol=1e-9):
        p = np.atleast_2d(points)
        return np.all((p >= np.asarray(self.origin) - tol) & (p <= self.upper + tol), axis=1)

    @classmethod
    def fit(cls, mesh, resolution=DEFAULT_RESOLUTION, padding=0.05, min_pad_voxels=3):
        """Bounding box of `mesh` grown by `padding` (fraction of the extent)."""
        lo, hi = mesh.bounds()
        pad = np.maximum(padding * (hi - lo), min_pad_voxels / resolution)
        lo, hi = lo - pad, hi + pad
        dims = np.maximum(np.ceil((hi - lo) * resolution).astype(int) + 1, 2)
        return cls(tuple(dims), resolution, tuple(lo))


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Unsigned (``sign is None``) or signed distance field on a grid."""

    spec: GridSpec
    distance: np.ndarray
    closest_point: np.ndarray
    triangle: np.ndarray
    tri_points: np.ndarray
    sign: np.ndarray | None = None

    @property
    def is_signed(self):
        return self.sign is not None

    def signed_distance(self):
        if self.sign is None:
            raise ValueError("field has no sign; call sign_field first")
        return self.sign * self.distance

    def nearest_node(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.rint((p - np.asarray(self.spec.origin)) * self.spec.resolution).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.spec.dims)), axis=1)
        return np.clip(idx, 0, np.asarray(self.spec.dims) - 1), inside


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
    cx, cy, cz = t[2, 0], t[2, 1], t[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@numba.njit(cache=True)
def _seed(tri_points, origin, res, band, dist, cp, tid):
    nx, ny, nz = dist.shape
    h = 1.0 / res
    for t in range(tri_points.shape[0]):
        tp = tri_points[t]
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        for a in range(3):
            mn = min(tp[0, a], tp[1, a], tp[2, a]) - band * h
            mx = max(tp[0, a], tp[1, a], tp[2, a]) + band * h
            lo[a] = max(int(np.ceil((mn - origin[a]) * res - 1e-9)), 0)
            hi[a] = min(int(np.floor((mx - origin[a]) * res + 1e-9)), dist.shape[a] - 1)
        for i in range(lo[0], hi[0] + 1):
            x = origin[0] + i * h
            for j in range(lo[1], hi[1] + 1):
                y = origin[1] + j * h
                for k in range(lo[2], hi[2] + 1):
                    z = origin[2] + k * h
                    qx, qy, qz = _closest_on_triangle(x, y, z, tp)
                    d = np.sqrt((qx - x) ** 2 + (qy - y) ** 2 + (qz - z) ** 2)
                    if d < dist[i, j, k]:
                        dist[i, j, k] = d
                        cp[i, j, k, 0] = qx
                        cp[i, j, k, 1] = qy
                        cp[i, j, k, 2] = qz
                        tid[i, j, k] = t


@numba.njit(cache=True)
def _sweep(tri_points, origin, res, dist, cp, tid, sx, sy, sz):
    nx, ny, nz = dist.shape
    h = 1.0 / res
    biggest = 0.0
    i0, i1 = (0, nx) if sx > 0 else (nx - 1, -1)
    j0, j1 = (0, ny) if sy > 0 else (ny - 1, -1)
    k0, k1 = (0, nz) if sz > 0 else (nz - 1, -1)
    for i in range(i0, i1, sx):
        x = origin[0] + i * h
        for j in range(j0, j1, sy):
            y = origin[1] + j * h
            for k in range(k0, k1, sz):
                z = origin[2] + k * h
                for di in range(2):
                    ii = i - di * sx
                    if ii < 0 or ii >= nx:
                        continue
                    for dj in range(2):
                        jj = j - dj * sy
                        if jj < 0 or jj >= ny:
                            continue
                        for dk in range(2):
                            if di == 0 and dj == 0 and dk == 0:
                                continue
                            kk = k - dk * sz
                            if kk < 0 or kk >= nz:
                                continue
                            t = tid[ii, jj, kk]
                            if t < 0 or t == tid[i, j, k]:
                                continue
                            qx, qy, qz = _closest_on_triangle(x, y, z, tri_points[t])
                            d = np.sqrt((qx - x) ** 2 + (qy - y) ** 2 + (qz - z) ** 2)
                            if d < dist[i, j, k]:
                                old = dist[i, j, k]
                                change = old - d if np.isfinite(old) else np.inf
                                if change > biggest:
                                    biggest = change
                                dist[i, j, k] = d
                                cp[i, j, k, 0] = qx
                                cp[i, j, k, 1] = qy
                                cp[i, j, k, 2] = qz
                                tid[i, j, k] = t
    return biggest


@numba.njit(cache=True)
def _query(points, origin, res, dims, tid, tri_points, clamp, out_cp, out_d):
    n = points.shape[0]
    ok = np.ones(n, np.bool_)
    for p in range(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        base = np.empty(3, np.int64)
        for a in range(3):
            f = (points[p, a] - origin[a]) * res
            b = int(np.floor(f))
            if f < -1e-9 or f > dims[a] - 1 + 1e-9:
                if not clamp:
                    ok[p] = False
                b = min(max(b, 0), dims[a] - 2)
            else:
                b = min(max(b, 0), dims[a] - 2)
            base[a] = b
        best = np.inf
        bx = by = bz = 0.0
        for di in range(2):
            for dj in range(2):
                for dk in range(2):
                    t = tid[base[0] + di, base[1] + dj, base[2] + dk]
                    if t < 0:
                        continue
                    qx, qy, qz = _closest_on_triangle(px, py, pz, tri_points[t])
                    d = np.sqrt((qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2)
                    if d < best:
                        best = d
                        bx, by, bz = qx, qy, qz
        out_cp[p, 0] = bx
        out_cp[p, 1] = by
        out_cp[p, 2] = bz
        out_d[p] = best
    return ok


_OCTANTS = [(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]


def build_distance_field(mesh, spec=None, resolution=DEFAULT_RESOLUTION, max_passes=16):
    """Unsigned distance field of `mesh` with per-node closest points.

    When `spec` is omitted the grid is fitted to the mesh bounding box
    (5% padding) at `resolution` voxels per meter.
    """
    if spec is None:
        spec = GridSpec.fit(mesh, resolution)
    if not np.all(spec.contains(mesh.vertices)):
        raise OutOfBounds("mesh extends outside the grid")
    tri_points = np.ascontiguousarray(mesh.vertices[mesh.triangles])
    origin = np.asarray(spec.origin)
    dist = np.full(spec.dims, np.inf)
    cp = np.zeros(spec.dims + (3,))
    tid = np.full(spec.dims, -1, dtype=np.int32)
    _seed(tri_points, origin, spec.resolution, NARROW_BAND, dist, cp, tid)
    for _ in range(max_passes):
        change = 0.0
        for sx, sy, sz in _OCTANTS:
            change = max(change, _sweep(tri_points, origin, spec.resolution, dist, cp, tid, sx, sy, sz))
        if change < SWEEP_TOL:
            break
    return DistanceField(spec, dist, cp, tid, tri_points)


def sign_field(mesh, field):
    """Attach inside/outside signs by flood fill from the grid boundary.

    Nodes closer than half a voxel to the surface get sign 0; they form a
    barrier no 6-connected path can cross. Non-surface nodes connected to
    the grid boundary are outside (+1), the rest inside (-1). Triangle
    winding is never consulted.
    """
    if not mesh.is_closed_manifold():
        raise NotWatertight("sign requires a closed manifold mesh")
    surface = field.distance <= 0.5 * field.spec.spacing * (1 + 1e-9)
    labels, _ = ndimage.label(~surface)
    boundary = np.concatenate(
        [labels[[0, -1]].ravel(), labels[:, [0, -1]].ravel(), labels[:, :, [0, -1]].ravel()]
    )
    outside_ids = np.unique(boundary[boundary > 0])
    outside = np.isin(labels, outside_ids)
    sign = np.where(surface, 0, np.where(outside, 1, -1)).astype(np.int8)
    return DistanceField(field.spec, field.distance, field.closest_point, field.triangle, field.tri_points, sign)


def open_sign(field):
    """Signs for an open surface, which encloses nothing: near-surface nodes
    (within half a voxel) get 0 and every other node +1."""
    surface = field.distance <= 0.5 * field.spec.spacing * (1 + 1e-9)
    sign = np.where(surface, 0, 1).astype(np.int8)
    return DistanceField(field.spec, field.distance, field.closest_point, field.triangle, field.tri_points, sign)


def build_signed_field(mesh, spec=None, resolution=DEFAULT_RESOLUTION, allow_open=False):
    """Distance field with signs; open meshes raise unless `allow_open`."""
    field = build_distance_field(mesh, spec, resolution)
    if allow_open and not mesh.is_closed_manifold():
        return open_sign(field)
    return sign_field(mesh, field)


def query_closest(field, p, clamp=False):
    """Closest surface point(s) and distance(s) from the eight surrounding nodes.

    Accepts one point ``(3,)`` or many ``(k, 3)``. Points outside the grid
    raise :class:`OutOfBounds` unless `clamp` is set, in which case the
    nearest boundary cell supplies the candidates.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.ascontiguousarray(np.atleast_2d(p))
    cp = np.empty_like(pts)
    d = np.empty(len(pts))
    ok = _query(pts, np.asarray(field.spec.origin), field.spec.resolution,
                np.asarray(field.spec.dims), field.triangle, field.tri_points, clamp, cp, d)
    if not clamp and not ok.all():
        raise OutOfBounds(f"{int((~ok).sum())} query point(s) outside the grid")
    if single:
        return cp[0], float(d[0])
    return cp, d


def sample_signed(field, points):
    """Nearest-node signed distance; points off the grid read as +inf."""
    idx, inside = field.nearest_node(points)
    sd = field.signed_distance()[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
    sd[~inside] = np.inf
    return sd


# --------------------------------------------------------------------------
# binary dump: 7 x f64 header, f32 distances and i8 signs, x fastest


def save_field(field, path):
    spec = field.spec
    header = struct.pack("<7d", *spec.dims, spec.resolution, *spec.origin)
    sign = field.sign if field.sign is not None else np.zeros(spec.dims, np.int8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.distance.astype("<f4").tobytes(order="F"))
        fh.write(sign.astype("i1").tobytes(order="F"))


def load_field_arrays(path):
    """Read a dump back as ``(GridSpec, distance, sign)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    vals = struct.unpack_from("<7d", raw)
    spec = GridSpec(tuple(int(v) for v in vals[:3]), vals[3], vals[4:7])
    n = int(np.prod(spec.dims))
    off = struct.calcsize("<7d")
    dist = np.frombuffer(raw, "<f4", n, off).reshape(spec.dims, order="F")
    sign = np.frombuffer(raw, "i1", n, off + 4 * n).reshape(spec.dims, order="F")
    return spec, dist.astype(float), sign.astype(np.int8)
