"""Discrete-shell deformation terms in residual form with analytic Jacobians.

Every energy here is a sum of squared residuals, ``E = |r|^2``:

    area   r_i  = sqrt(Abar_i / 2) (A_i / Abar_i - 1)
    angle  r_ik = sqrt(Abar_i / 6) (theta_ik / thetabar_ik - 1)
    hinge  r_e  = sqrt(|ebar| / hbar_e) (theta_e - thetabar_e)

with ``hbar_e`` one third of the summed heights of the two triangles on `e`.
Registration minimizes these with Gauss-Newton type steps and the cloth
simulator uses ``2 J^T r`` as the force and ``2 J^T J`` as its stiffness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .errors import DegenerateRestShape, DomainError


def _cross(a, b):
    return np.cross(a, b)


def _norm(a):
    return np.linalg.norm(a, axis=-1)


def area_and_grad(x, tri):
    """Triangle areas ``(T,)`` and their gradients ``(T, 3 vertices, 3)``."""
    p0, p1, p2 = x[tri[:, 0]], x[tri[:, 1]], x[tri[:, 2]]
    n = _cross(p1 - p0, p2 - p0)
    nn = _norm(n)
    A = 0.5 * nn
    nh = n / np.where(nn > 0, nn, 1.0)[:, None]
    g = np.empty((len(tri), 3, 3))
    g[:, 0] = 0.5 * _cross(nh, p2 - p1)
    g[:, 1] = 0.5 * _cross(nh, p0 - p2)
    g[:, 2] = 0.5 * _cross(nh, p1 - p0)
    return A, g


def angles_and_grad(x, tri):
    """Corner angles ``(T, 3)`` and gradients ``(T, corner, vertex, 3)``.

    Corner `k` sits at ``tri[:, k]``; the vertex axis of the gradient uses the
    triangle's own vertex order.
    """
    T = len(tri)
    p = x[tri]  # (T, 3, 3)
    n = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    nn = _norm(n)
    nh = n / np.where(nn > 0, nn, 1.0)[:, None]
    theta = np.empty((T, 3))
    g = np.zeros((T, 3, 3, 3))
    for k in range(3):
        a, b, c = k, (k + 1) % 3, (k + 2) % 3
        u = p[:, b] - p[:, a]
        v = p[:, c] - p[:, a]
        cr = _cross(u, v)
        theta[:, k] = np.arctan2(_norm(cr), np.einsum("ij,ij->i", u, v))
        gb = -_cross(nh, u) / np.einsum("ij,ij->i", u, u)[:, None]
        gc = _cross(nh, v) / np.einsum("ij,ij->i", v, v)[:, None]
        g[:, k, b] = gb
        g[:, k, c] = gc
        g[:, k, a] = -(gb + gc)
    return theta, g


def find_hinges(tri):
    """Interior edges as ``(E, 4)`` rows ``(v0, v1, opp1, opp2)``.

    The first triangle holds the directed edge ``v0 -> v1``, the second holds
    ``v1 -> v0``. Boundary and non-manifold edges are skipped.
    """
    tri = np.asarray(tri)
    directed = {}
    for t in tri:
        for k in range(3):
            a, b, c = int(t[k]), int(t[(k + 1) % 3]), int(t[(k + 2) % 3])
            if (a, b) in directed:
                directed[(a, b)] = None  # non-manifold
            else:
                directed[(a, b)] = c
    out = []
    for (a, b), c in directed.items():
        if a < b and c is not None:
            d = directed.get((b, a))
            if d is not None:
                out.append((a, b, c, d))
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def dihedral_and_grad(x, hinges):
    """Signed hinge angles ``(E,)`` (0 when flat) and gradients ``(E, 4, 3)``."""
    x0, x1, x2, x3 = (x[hinges[:, k]] for k in range(4))
    e = x1 - x0
    el = _norm(e)
    eh = e / el[:, None]
    n1 = _cross(e, x2 - x0)
    n2 = _cross(x0 - x1, x3 - x1)
    s = np.einsum("ij,ij->i", _cross(n1, n2), eh)
    c = np.einsum("ij,ij->i", n1, n2)
    theta = np.arctan2(s, c)
    n1s = np.einsum("ij,ij->i", n1, n1)
    n2s = np.einsum("ij,ij->i", n2, n2)
    g2 = -(el / n1s)[:, None] * n1
    g3 = -(el / n2s)[:, None] * n2
    t1 = np.einsum("ij,ij->i", x2 - x0, e) / el**2
    t2 = np.einsum("ij,ij->i", x3 - x0, e) / el**2
    g = np.empty((len(hinges), 4, 3))
    g[:, 0] = -(1 - t1)[:, None] * g2 - (1 - t2)[:, None] * g3
    g[:, 1] = -t1[:, None] * g2 - t2[:, None] * g3
    g[:, 2] = g2
    g[:, 3] = g3
    return theta, g


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class Weights:
    area: float = 1.0
    angle: float = 1.0
    hinge: float = 1.0


class Shell:
    """Rest-shape data of a triangle mesh and its deformation residuals.

    Parameters
    ----------
    rest : TriMesh
        Undeformed shape. Zero-area triangles or zero corner angles raise
        :class:`DegenerateRestShape`.
    """

    def __init__(self, rest):
        self.tri = np.asarray(rest.triangles, dtype=np.int64)
        self.n_vertices = rest.n_vertices
        xr = np.asarray(rest.vertices, float)
        self.rest_area, _ = area_and_grad(xr, self.tri)
        if np.any(self.rest_area <= 1e-14):
            raise DegenerateRestShape("rest mesh has zero-area triangles")
        self.rest_angle, _ = angles_and_grad(xr, self.tri)
        if np.any(self.rest_angle <= 1e-9):
            raise DegenerateRestShape("rest mesh has zero corner angles")
        self.hinges = find_hinges(self.tri)
        h = self.hinges
        self.rest_dihedral, _ = dihedral_and_grad(xr, h) if len(h) else (np.zeros(0), None)
        el = _norm(xr[h[:, 1]] - xr[h[:, 0]]) if len(h) else np.zeros(0)
        self.rest_edge = el
        if len(h):
            a1 = 0.5 * _norm(_cross(xr[h[:, 1]] - xr[h[:, 0]], xr[h[:, 2]] - xr[h[:, 0]]))
            a2 = 0.5 * _norm(_cross(xr[h[:, 0]] - xr[h[:, 1]], xr[h[:, 3]] - xr[h[:, 1]]))
            self.rest_hbar = (2 * a1 / el + 2 * a2 / el) / 3.0
        else:
            self.rest_hbar = np.zeros(0)
        self._sq_area = np.sqrt(self.rest_area / 2)
        self._sq_angle = np.sqrt(self.rest_area / 6)
        self._sq_hinge = np.sqrt(self.rest_edge / np.where(self.rest_hbar > 0, self.rest_hbar, 1.0))

    def check(self, x):
        x = np.asarray(x, float)
        if x.shape != (self.n_vertices, 3):
            raise DomainError("vertex array does not match the rest connectivity")
        return x

    # --- residual blocks; each returns (r, grad rows (m, k, 3), vertex ids (m, k))

    def area_block(self, x, jac=True):
        A, g = area_and_grad(x, self.tri)
        r = self._sq_area * (A / self.rest_area - 1)
        if not jac:
            return r, None, None
        return r, (self._sq_area / self.rest_area)[:, None, None] * g, self.tri

    def angle_block(self, x, jac=True):
        th, g = angles_and_grad(x, self.tri)
        r = (self._sq_angle[:, None] * (th / self.rest_angle - 1)).ravel()
        if not jac:
            return r, None, None
        G = (self._sq_angle[:, None] / self.rest_angle)[:, :, None, None] * g
        ids = np.repeat(self.tri[:, None, :], 3, axis=1).reshape(-1, 3)
        return r, G.reshape(-1, 3, 3), ids

    def hinge_block(self, x, jac=True):
        if not len(self.hinges):
            return np.zeros(0), np.zeros((0, 4, 3)), np.zeros((0, 4), np.int64)
        th, g = dihedral_and_grad(x, self.hinges)
        r = self._sq_hinge * wrap_angle(th - self.rest_dihedral)
        if not jac:
            return r, None, None
        return r, self._sq_hinge[:, None, None] * g, self.hinges

    def energies(self, x):
        x = self.check(x)
        return {
            "area": float(np.sum(self.area_block(x, False)[0] ** 2)),
            "angle": float(np.sum(self.angle_block(x, False)[0] ** 2)),
            "hinge": float(np.sum(self.hinge_block(x, False)[0] ** 2)),
        }

    def residuals(self, x, w=Weights(), jac=False):
        """Stacked weighted residuals and (optionally) the sparse Jacobian.

        Blocks with zero weight are omitted.
        """
        x = self.check(x)
        blocks = []
        for name, fn in (("area", self.area_block), ("angle", self.angle_block), ("hinge", self.hinge_block)):
            k = getattr(w, name)
            if k < 0:
                raise DomainError(f"negative {name} weight")
            if k > 0:
                r, G, ids = fn(x, jac)
                s = np.sqrt(k)
                blocks.append((s * r, None if G is None else s * G, ids))
        return stack_blocks(blocks, self.n_vertices, jac)


def stack_blocks(blocks, n_vertices, jac=True):
    """Concatenate residual blocks; build the CSR Jacobian when `jac`."""
    if not blocks:
        return (np.zeros(0), sp.csr_matrix((0, 3 * n_vertices))) if jac else np.zeros(0)
    r = np.concatenate([b[0] for b in blocks])
    if not jac:
        return r
    rows, cols, vals = [], [], []
    off = 0
    for rb, G, ids in blocks:
        m, k = ids.shape
        rr = np.broadcast_to((off + np.arange(m))[:, None, None], (m, k, 3))
        cc = 3 * ids[:, :, None] + np.arange(3)[None, None, :]
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(G.ravel())
        off += m
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(off, 3 * n_vertices))
    return r, J


# --------------------------------------------------------------------------
# fused Gauss-Newton assembly for the simulator
#
# Accumulates E = |r|^2, g = 2 J^T r and H = 2 J^T J straight into upper
# banded storage (LAPACK layout, ab[u + i - j, j] = H[i, j] for i <= j) over
# permuted DOFs 3 * pos[v] + d. Weights enter as sqrt factors.


@numba.njit(cache=True, error_model="numpy", inline="always")
def _scatter(ids, G, k, r, pos, u, ab, grad):
    for a in range(k):
        for da in range(3):
            ia = 3 * pos[ids[a]] + da
            grad[ia] += 2.0 * r * G[a, da]
            for b in range(k):
                for db in range(3):
                    ib = 3 * pos[ids[b]] + db
                    if ia <= ib:
                        ab[u + ia - ib, ib] += 2.0 * G[a, da] * G[b, db]


@numba.njit(cache=True, error_model="numpy")
def _crs(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@numba.njit(cache=True, error_model="numpy")
def gn_assemble(x, tri, hinges, sq_area, rest_area, sq_angle, rest_angle, sq_hinge, rest_dihedral,
                wa, wb, wh, pos, u, ab, grad, want_hessian):
    E = 0.0
    G = np.zeros((4, 3))
    ids = np.zeros(4, np.int64)
    sa, sb, sh = np.sqrt(wa), np.sqrt(wb), np.sqrt(wh)
    for t in range(tri.shape[0]):
        p0, p1, p2 = x[tri[t, 0]], x[tri[t, 1]], x[tri[t, 2]]
        n = _crs(p1 - p0, p2 - p0)
        nn = np.sqrt(n @ n)
        nh = n / nn if nn > 0 else n
        for c in range(3):
            ids[c] = tri[t, c]
        if wa > 0:
            A = 0.5 * nn
            r = sa * sq_area[t] * (A / rest_area[t] - 1.0)
            s = sa * sq_area[t] / rest_area[t] * 0.5
            G[0] = s * _crs(nh, p2 - p1)
            G[1] = s * _crs(nh, p0 - p2)
            G[2] = s * _crs(nh, p1 - p0)
            E += r * r
            if want_hessian:
                _scatter(ids, G, 3, r, pos, u, ab, grad)
        if wb > 0:
            for k in range(3):
                a, b, c = k, (k + 1) % 3, (k + 2) % 3
                pa, pb, pc = x[tri[t, a]], x[tri[t, b]], x[tri[t, c]]
                uu = pb - pa
                vv = pc - pa
                cr = _crs(uu, vv)
                th = np.arctan2(np.sqrt(cr @ cr), uu @ vv)
                r = sb * sq_angle[t] * (th / rest_angle[t, k] - 1.0)
                s = sb * sq_angle[t] / rest_angle[t, k]
                gb = -_crs(nh, uu) / (uu @ uu)
                gc = _crs(nh, vv) / (vv @ vv)
                G[a] = -s * (gb + gc)
                G[b] = s * gb
                G[c] = s * gc
                E += r * r
                if want_hessian:
                    _scatter(ids, G, 3, r, pos, u, ab, grad)
    if wh > 0:
        for e in range(hinges.shape[0]):
            x0, x1, x2, x3 = x[hinges[e, 0]], x[hinges[e, 1]], x[hinges[e, 2]], x[hinges[e, 3]]
            ev = x1 - x0
            el = np.sqrt(ev @ ev)
            n1 = _crs(ev, x2 - x0)
            n2 = _crs(x0 - x1, x3 - x1)
            th = np.arctan2(_crs(n1, n2) @ ev / el, n1 @ n2)
            d = th - rest_dihedral[e]
            d = (d + np.pi) % (2 * np.pi) - np.pi
            s = sh * sq_hinge[e]
            r = s * d
            E += r * r
            if want_hessian:
                g2 = -(el / (n1 @ n1)) * n1
                g3 = -(el / (n2 @ n2)) * n2
                t1 = ((x2 - x0) @ ev) / (el * el)
                t2 = ((x3 - x0) @ ev) / (el * el)
                G[0] = s * (-(1 - t1) * g2 - (1 - t2) * g3)
                G[1] = s * (-t1 * g2 - t2 * g3)
                G[2] = s * g2
                G[3] = s * g3
                for c in range(4):
                    ids[c] = hinges[e, c]
                _scatter(ids, G, 4, r, pos, u, ab, grad)
    return E

