"""Size normalization, distance-field ICP and non-rigid shell registration.

The non-rigid stage minimizes

    E = E_fit + kappa E_area + beta E_angle + alpha E_hinge

over the vertex positions of the source, where ``E_fit`` sums squared
barycenter-to-target distances weighted by rest triangle area and the other
terms are the discrete-shell penalties of :mod:`drapekit.shells` measured
against the rigidly aligned source.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateMesh, DomainError, IcpDiverged, InvalidMesh, NumericalFailure
from .lm import levenberg_marquardt
from .mesh import area_weighted_center, representative_size
from .sdf import query_closest
from .shells import Shell, Weights, stack_blocks

log = logging.getLogger(__name__)

#: relative RMS increase that counts as a rising ICP iteration
RISE_TOL = 1e-3


# --------------------------------------------------------------------------
# rigid


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise DomainError("rotation must be proper orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(3))

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self after other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle_deg(self):
        c = np.clip((np.trace(self.rotation) - 1) / 2, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


def rotation_about(axis, angle):
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def kabsch(P, Q, w=None):
    """Proper rigid motion minimizing ``sum w |R p + t - q|^2``."""
    w = np.ones(len(P)) if w is None else np.asarray(w, float)
    w = w / w.sum()
    cp, cq = w @ P, w @ Q
    H = (P - cp).T @ ((Q - cq) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cq - R @ cp)


def scale_to_target(source, target):
    """Scale `source` about its area-weighted center by ``l_T / l_S``."""
    if source.n_vertices == 0 or target.n_vertices == 0:
        raise InvalidMesh("empty mesh")
    ls = representative_size(source)
    if not ls > 0:
        raise DegenerateMesh("source has zero representative size")
    s = representative_size(target) / ls
    c = area_weighted_center(source)
    return source.with_vertices(c + s * (source.vertices - c))


def icp_rigid(source, target_field, max_iter=100, tol=1e-6, reject=3.0, diverge_after=5):
    """Rigidly align `source` to the surface stored in `target_field`.

    Returns ``(RigidTransform, rms)`` where the transform maps the original
    source onto the target and `rms` is the root-mean-square distance of the
    transformed vertices to their closest target points. Stops when the
    update or the relative change of the trimmed RMS (pairs within `reject`
    times the median distance) falls below `tol`; raises
    :class:`IcpDiverged` after `diverge_after` consecutive increases of the
    trimmed RMS by more than ``RISE_TOL``.
    """
    x = np.array(source.vertices, float)
    total = RigidTransform()
    prev, rising = np.inf, 0
    for it in range(max_iter):
        cp, d = query_closest(target_field, x, clamp=True)
        med = np.median(d)
        keep = d <= reject * med if med > 0 else np.ones(len(d), bool)
        if keep.sum() < 3:
            keep[:] = True
        # the trimmed RMS is what each Kabsch step minimizes
        trimmed = float(np.sqrt(np.mean(d[keep] ** 2)))
        if trimmed > prev * (1 + RISE_TOL):
            rising += 1
            if rising >= diverge_after:
                raise IcpDiverged(f"residual rose {rising} iterations in a row")
        else:
            rising = 0
        if abs(prev - trimmed) <= tol * max(trimmed, tol):
            break
        prev = trimmed
        step = kabsch(x[keep], cp[keep])
        x = step.apply(x)
        total = step.compose(total)
        if np.linalg.norm(step.rotation - np.eye(3)) + np.linalg.norm(step.translation) < tol:
            break
    _, d = query_closest(target_field, x, clamp=True)
    return total, float(np.sqrt(np.mean(d**2)))


def register_rigid(source, target, target_field, **kw):
    """Scale, pre-align area-weighted centers, then ICP. Returns the aligned mesh."""
    s = scale_to_target(source, target)
    s = s.with_vertices(s.vertices + (area_weighted_center(target) - area_weighted_center(s)))
    T, _ = icp_rigid(s, target_field, **kw)
    return s.with_vertices(T.apply(s.vertices))


# --------------------------------------------------------------------------
# non-rigid


@dataclass
class DeformationParams:
    """Weights and solver settings for non-rigid registration.

    kappa, beta, alpha : area, angle and hinge weights (fit weight is 1)
    fd_step : finite-difference step in meters
    exact : use the analytic Jacobian instead of finite differences
    normalize : measure lengths in units of the rest shape's representative
        size, which makes the energy balance independent of garment scale;
        with ``False`` the energies are evaluated in meters
    """

    kappa: float = 1.0
    beta: float = 1.0
    alpha: float = 0.1
    max_iter: int = 50
    tol: float = 1e-6
    fd_step: float = 1e-7
    exact: bool = False
    normalize: bool = True

    def __post_init__(self):
        if min(self.kappa, self.beta, self.alpha) < 0:
            raise DomainError("deformation weights must be non-negative")


@dataclass
class EnergyBreakdown:
    e_fit: float
    e_area: float
    e_angle: float
    e_hinge: float
    total: float

    def as_dict(self):
        return asdict(self)


class _Problem:
    """Energy terms in units of `unit` meters (the rest shape's size when
    normalizing), so the weighted sum does not depend on garment scale."""

    def __init__(self, rest, field, p):
        self.unit = representative_size(rest) if p.normalize else 1.0
        if not self.unit > 0:
            raise DegenerateMesh("rest shape has zero size")
        rest = rest.with_vertices(np.asarray(rest.vertices) / self.unit)
        self.shell = Shell(rest)
        self.field = field
        self.p = p
        self.w = Weights(p.kappa, p.beta, p.alpha)
        self.sq_fit = np.sqrt(self.shell.rest_area)
        self.tri = self.shell.tri

    def fit_block(self, x, jac=True):
        g = x[self.tri].mean(axis=1)
        cp, d = query_closest(self.field, g * self.unit, clamp=True)
        cp, d = cp / self.unit, d / self.unit
        r = self.sq_fit * d
        if not jac:
            return r, None, None
        with np.errstate(invalid="ignore", divide="ignore"):
            n = np.where(d[:, None] > 0, (g - cp) / d[:, None], 0.0)
        G = np.repeat((self.sq_fit[:, None] * n / 3.0)[:, None, :], 3, axis=1)
        return r, G, self.tri

    def blocks(self, x, jac):
        out = [self.fit_block(x, jac)]
        sh = self.shell
        for k, fn in ((self.w.area, sh.area_block), (self.w.angle, sh.angle_block), (self.w.hinge, sh.hinge_block)):
            if k > 0:
                r, G, ids = fn(x, jac)
                s = np.sqrt(k)
                out.append((s * r, None if G is None else s * G, ids))
        return out

    def residual(self, flat):
        x = flat.reshape(-1, 3)
        return np.concatenate([b[0] for b in self.blocks(x, False)])

    def exact_jacobian(self, flat, r=None):
        return stack_blocks(self.blocks(flat.reshape(-1, 3), True), self.shell.n_vertices)[1]

    # colored forward differences over the known sparsity pattern
    def _pattern(self, x):
        if hasattr(self, "_stencil"):
            return
        ids = [b[2] for b in self.blocks(x, True)]
        width = max(i.shape[1] for i in ids)
        st = np.full((sum(len(i) for i in ids), width), -1, np.int64)
        off = 0
        for i in ids:
            st[off:off + len(i), : i.shape[1]] = i
            off += len(i)
        n = self.shell.n_vertices
        nbrs = [set() for _ in range(n)]
        for row in np.unique(np.sort(st, axis=1), axis=0):
            row = row[row >= 0]
            for a in row:
                nbrs[a].update(row.tolist())
        color = np.full(n, -1)
        for v in range(n):
            used = {color[u] for u in nbrs[v] if color[u] >= 0}
            c = 0
            while c in used:
                c += 1
            color[v] = c
        self._stencil, self._color = st, color

    def fd_jacobian(self, flat, r):
        self._pattern(flat.reshape(-1, 3))
        st, color = self._stencil, self._color
        h = self.p.fd_step / self.unit
        rows, cols, vals = [], [], []
        valid = st >= 0
        scol = np.where(valid, color[np.maximum(st, 0)], -1)
        for c in range(color.max() + 1):
            verts = np.nonzero(color == c)[0]
            hit_r, hit_k = np.nonzero(scol == c)
            hv = st[hit_r, hit_k]
            for d in range(3):
                xp = flat.copy()
                xp[3 * verts + d] += h
                dr = (self.residual(xp) - r) / h
                rows.append(hit_r)
                cols.append(3 * hv + d)
                vals.append(dr[hit_r])
        m = len(r)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(m, 3 * self.shell.n_vertices))

    def breakdown(self, x):
        fit = float(np.sum(self.fit_block(x, False)[0] ** 2))
        e = self.shell.energies(x)
        total = fit + self.p.kappa * e["area"] + self.p.beta * e["angle"] + self.p.alpha * e["hinge"]
        return EnergyBreakdown(fit, e["area"], e["angle"], e["hinge"], total)


def deformation_energy(S, S_bar, T_field, p=DeformationParams()):
    """Energy terms of `S` against rest shape `S_bar` and target field."""
    if S.n_vertices != S_bar.n_vertices or not np.array_equal(S.triangles, S_bar.triangles):
        raise DomainError("S and S_bar must share connectivity")
    prob = _Problem(S_bar, T_field, p)
    return prob.breakdown(np.asarray(S.vertices, float) / prob.unit)


def nonrigid_register(S_bar, T_field, p=DeformationParams()):
    """Deform `S_bar` toward the target surface while keeping its shell shape.

    Returns ``(S_star, EnergyBreakdown, log)``; `log` lists every LM trial
    with the objective after the iteration (unchanged when rejected).
    """
    prob = _Problem(S_bar, T_field, p)
    x0 = np.array(S_bar.vertices, float) / prob.unit
    jac = prob.exact_jacobian if p.exact else prob.fd_jacobian
    res = levenberg_marquardt(prob.residual, x0.ravel(), jac, max_iter=p.max_iter, rtol=p.tol)
    x = res.x.reshape(-1, 3)
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("non-finite vertex positions")
    e = prob.breakdown(x)
    if not np.isfinite(e.total):
        raise NumericalFailure("non-finite energy")
    log.debug("nonrigid: %d iterations, %d accepted, %s", res.iterations, res.accepted, res.reason)
    out = S_bar if res.accepted == 0 else S_bar.with_vertices(x * prob.unit)
    return out, e, res.log


def register(source, target, target_field, p=DeformationParams(), rigid_kw=None):
    """Rigid then non-rigid registration of `source` onto `target`.

    Returns ``(rigid_mesh, nonrigid_mesh, EnergyBreakdown)``.
    """
    rigid = register_rigid(source, target, target_field, **(rigid_kw or {}))
    nr, e, _ = nonrigid_register(rigid, target_field, p)
    return rigid, nr, e


def mesh_to_mesh_error(A, B_field):
    """Area-weighted mean barycenter distance from `A` to the surface in `B_field`."""
    if A.n_triangles == 0:
        raise InvalidMesh("empty mesh")
    w = A.areas
    _, d = query_closest(B_field, A.barycenters, clamp=True)
    return float(np.sum(d * w) / np.sum(w))
