"""Grasp-configuration objective, range-profile curvature scan and the
iterative regrasp loop run entirely in simulation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (CategoryMismatch, DomainError, IcpDiverged, NumericalFailure, SignalTooShort,
                     ValidationError)
from .registration import DeformationParams, mesh_to_mesh_error, nonrigid_register, register_rigid, rotation_about

log = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-12


class ZeroPriorWarning(UserWarning):
    """A pair with zero prior probability was clamped."""


# --------------------------------------------------------------------------
# objective


@dataclass
class GraspObjectiveSpec:
    """Desired two-hand grasp and the Gaussian objective around it.

    Parameters
    ----------
    left, right : array_like (3,)
        Desired grasp points ``x*_L`` and ``x*_R`` in the garment's rest frame.
    sigma_l, sigma_r : float
        Widths (1/m^2); larger values make the peak narrower.
    anchors : dict
        Anchor set ``S_g``, label -> rest-frame point.
    prior : dict, optional
        ``(label_l, label_r) -> p``; must sum to 1 over ``S_g x S_g``.
        Defaults to uniform.
    xi : float, optional
        Convergence threshold on ``ln f``; defaults to the score at the
        desired pair plus ``ln 0.9``.
    """

    left: np.ndarray
    right: np.ndarray
    sigma_l: float = 100.0
    sigma_r: float = 100.0
    anchors: dict = field(default_factory=dict)
    prior: dict | None = None
    xi: float | None = None
    left_label: str | None = None
    right_label: str | None = None

    def __post_init__(self):
        self.left = np.asarray(self.left, float).reshape(3)
        self.right = np.asarray(self.right, float).reshape(3)
        self.anchors = {str(k): np.asarray(v, float).reshape(3) for k, v in self.anchors.items()}
        if not (self.sigma_l > 0 and self.sigma_r > 0):
            raise DomainError("sigma_l and sigma_r must be positive")
        if self.prior is not None:
            self.prior = {(str(a), str(b)): float(p) for (a, b), p in self.prior.items()}
            labels = set(self.anchors)
            if any(a not in labels or b not in labels for a, b in self.prior):
                raise DomainError("prior refers to unknown anchors")
            if any(p < 0 for p in self.prior.values()):
                raise DomainError("prior probabilities must be non-negative")
            if abs(sum(self.prior.values()) - 1.0) > 1e-9:
                raise DomainError("prior must sum to 1 over S_g x S_g")
        if self.xi is not None and not math.isfinite(self.xi):
            raise DomainError("xi must be finite")
        self._labels = list(self.anchors)
        self._tree = cKDTree(np.array([self.anchors[k] for k in self._labels])) if self.anchors else None

    @classmethod
    def from_mesh(cls, mesh, left_label, right_label, **kw):
        """Spec on a flat garment mesh whose anchors include both labels."""
        pts = {k: mesh.vertices[v] for k, v in mesh.anchors.items()}
        for k in (left_label, right_label):
            if k not in pts:
                raise DomainError(f"unknown anchor {k!r}")
        return cls(pts[left_label], pts[right_label], anchors=pts, left_label=left_label,
                   right_label=right_label, **kw)

    def nearest_label(self, point):
        if self._tree is None:
            return None
        return self._labels[int(self._tree.query(np.asarray(point, float))[1])]

    def prior_of(self, a, b):
        """``p(a, b | y)`` for anchor labels (uniform when no table is set)."""
        if self.prior is None:
            n = len(self.anchors)
            return 1.0 / (n * n) if n else 1.0
        return self.prior.get((a, b), 0.0)

    def threshold(self):
        if self.xi is not None:
            return self.xi
        return grasp_objective(self, self.left, self.right) + math.log(0.9)

    def to_json(self):
        return {"left": self.left.tolist(), "right": self.right.tolist(), "sigma_l": self.sigma_l,
                "sigma_r": self.sigma_r, "anchors": {k: v.tolist() for k, v in self.anchors.items()},
                "prior": None if self.prior is None else [[a, b, p] for (a, b), p in self.prior.items()],
                "xi": self.xi, "left_label": self.left_label, "right_label": self.right_label}

    @classmethod
    def from_json(cls, d):
        known = {"left", "right", "sigma_l", "sigma_r", "anchors", "prior", "xi", "left_label", "right_label"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown grasp spec keys: {sorted(extra)}")
        d = dict(d)
        if d.get("prior") is not None:
            d["prior"] = {(a, b): p for a, b, p in d["prior"]}
        return cls(**d)


def _point(spec, a):
    if isinstance(a, str):
        if a not in spec.anchors:
            raise DomainError(f"unknown anchor {a!r}")
        return spec.anchors[a], a
    p = np.asarray(a, float).reshape(3)
    return p, spec.nearest_label(p)


def grasp_objective(spec, x_L, x_R, anchor_set=None):
    """Log score ``ln f`` of a two-hand grasp; higher is better.

    ``ln f = -sum over (x_l, x_r) of [sigma_l |x_l - x*_L|^2
    + sigma_r |x_r - x*_R|^2 - ln p(x_l, x_r | y)]``.

    The sum runs over `anchor_set`, a sequence of ``(a_l, a_r)`` pairs whose
    members are anchor labels or rest-frame points; by default it is the
    single pair ``(x_L, x_R)``. The prior of a point is read at its nearest
    anchor. Zero probabilities are clamped to ``1e-12`` with a
    :class:`ZeroPriorWarning`.
    """
    pairs = [(x_L, x_R)] if anchor_set is None else list(anchor_set)
    total = 0.0
    clamped = False
    for a, b in pairs:
        pa, la = _point(spec, a)
        pb, lb = _point(spec, b)
        p = spec.prior_of(la, lb)
        if p <= 0.0:
            p, clamped = PRIOR_FLOOR, True
        total += spec.sigma_l * float(np.sum((pa - spec.left) ** 2)) \
            + spec.sigma_r * float(np.sum((pb - spec.right) ** 2)) - math.log(p)
    if clamped:
        warnings.warn("zero prior probability clamped to 1e-12", ZeroPriorWarning, stacklevel=2)
    return -total


# --------------------------------------------------------------------------
# curvature scan


def log_kernel(sigma):
    """Laplacian-of-Gaussian ``g''`` sampled on ``[-4 sigma, 4 sigma]`` (in
    samples), shifted to zero sum so flat profiles give no response."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    r = int(math.ceil(4 * sigma))
    x = np.arange(-r, r + 1, dtype=float)
    g = (x**2 / sigma**4 - 1 / sigma**2) * np.exp(-(x**2) / (2 * sigma**2))
    return g - g.mean()


def curvature_scan(profile, sigma=10.0):
    """Filter a range profile with the LoG kernel.

    Returns ``(index, response)``: the index of the minimum response (first
    one on ties) and the same-length response, computed with edge values
    repeated past both ends.
    """
    p = np.asarray(profile, float).ravel()
    if not np.all(np.isfinite(p)):
        raise DomainError("profile must be finite")
    k = log_kernel(sigma)
    if len(p) < len(k):
        raise SignalTooShort(f"profile has {len(p)} samples, kernel needs {len(k)}")
    r = len(k) // 2
    padded = np.pad(p, r, mode="edge")
    resp = np.convolve(padded, k[::-1], mode="valid")
    return int(np.argmin(resp)), resp


def range_profile(mesh, height, x_range, n_samples, sensor_y=None, max_range=1.0):
    """Horizontal range scan of `mesh` at height `height`.

    The sensor moves along x over `x_range` and looks along +y from
    ``sensor_y`` (default: just in front of the mesh); each sample is the
    distance to the first triangle hit, or `max_range` when nothing is hit.
    """
    v = np.asarray(mesh.vertices, float)
    if sensor_y is None:
        sensor_y = float(v[:, 1].min()) - 0.05
    xs = np.linspace(x_range[0], x_range[1], n_samples)
    orig = np.column_stack([xs, np.full(n_samples, sensor_y), np.full(n_samples, float(height))])
    d = np.array([0.0, 1.0, 0.0])
    T = v[mesh.triangles]
    e1, e2 = T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    T, e1, e2, pvec, det = T[ok], e1[ok], e2[ok], pvec[ok], det[ok]
    out = np.full(n_samples, float(max_range))
    for i, o in enumerate(orig):
        s = o - T[:, 0]
        u = np.einsum("ij,ij->i", s, pvec) / det
        q = np.cross(s, e1)
        w = (q @ d) / det
        t = np.einsum("ij,ij->i", e2, q) / det
        hit = (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 0)
        if hit.any():
            out[i] = min(float(t[hit].min()), max_range)
    return out


# --------------------------------------------------------------------------
# regrasp loop


@dataclass
class RegraspResult:
    left: int
    right: int
    score: float
    xi: float
    converged: bool
    trace: list

    @property
    def iterations(self):
        return len(self.trace)

    def to_json(self):
        return {"left": self.left, "right": self.right, "score": self.score, "xi": self.xi,
                "converged": self.converged, "iterations": self.iterations, "trace": self.trace}


def _recognize(db, feature, category, w, step):
    mismatches = []
    for entry, score in db.ranked(feature, w):
        if category is None or entry.category == category:
            return entry, score, mismatches
        err = CategoryMismatch(f"{entry.entry_id} is a {entry.category}, expected {category}")
        log.info("iteration %d: %s", step, err)
        mismatches.append({"entry": entry.entry_id, "score": float(score), "error": type(err).__name__})
    raise CategoryMismatch(f"no database entry of category {category!r}")


def _register(entry, hung, field_, p, tilt=0.0):
    src = entry.draped_mesh
    if tilt:
        c = src.vertices.mean(axis=0)
        src = src.with_vertices((src.vertices - c) @ rotation_about([0, 0, 1], tilt).T + c)
    rigid = register_rigid(src, hung, field_)
    nonrigid, e, _ = nonrigid_register(rigid, field_, p)
    return rigid, nonrigid, e


def regrasp_loop(db, garment, spec, start_vertex, max_iters=3, w=None, noise=None,
                 deformation=DeformationParams(), seed=0):
    """Iterative pick, recognize, register and regrasp procedure.

    Each iteration hangs `garment` from the current grasp vertex, turns the
    hung shape into a query (optionally perturbed by `noise`), recognizes
    it in `db`, registers the matched database drape onto the hung shape
    and maps one desired anchor through the registration. The mapped point
    snaps to the nearest vertex of the hung mesh, which becomes the next
    grasp. If the recognized grasp is the desired left point, the right one
    is mapped (and vice versa); otherwise the loop goes for the left point.

    The pair ``(current, next)`` is scored with :func:`grasp_objective` at
    the vertices' rest positions. The loop runs while the score is below
    ``xi`` (starting from ``-inf``) and at most `max_iters` times.

    Parameters
    ----------
    db : drapekit.garmentdb.Database
    garment : drapekit.garmentdb.Garment
        Flat garment; its vertex positions are the rest frame of `spec`.
    spec : GraspObjectiveSpec
        Needs ``left_label`` and ``right_label`` naming database anchors.
    """
    from .clothsim import simulate_hang
    from .garmentdb import field_for, mesh_feature, perturb_query

    if max_iters < 1:
        raise DomainError("max_iters must be at least 1")
    if spec.left_label is None or spec.right_label is None:
        raise DomainError("spec needs left_label and right_label")
    mesh = garment.mesh
    rest = np.asarray(mesh.vertices, float)
    settings = db.settings
    xi = spec.threshold()
    score = -math.inf
    grasp = int(start_vertex)
    trace = []
    pair = (grasp, grasp)
    for it in range(1, max_iters + 1):
        if score >= xi:
            break
        hung = simulate_hang(mesh, grasp, settings.sim, max_time=settings.max_time)
        query = hung if noise is None else perturb_query(hung, noise, seed=seed + it)
        feat = mesh_feature(query, settings)
        entry, mscore, mismatches = _recognize(db, feat, garment.category, w, it)
        field_ = field_for(query, settings.grid_nodes)
        rec = {"iteration": it, "grasp_vertex": grasp, "match": entry.entry_id, "match_score": float(mscore),
               "category_mismatches": mismatches}
        try:
            try:
                rigid, nonrigid, e = _register(entry, query, field_, deformation)
            except (IcpDiverged, NumericalFailure) as exc:
                log.info("registration failed (%s); retrying with a perturbed start", exc)
                rec["retried"] = True
                rigid, nonrigid, e = _register(entry, query, field_, deformation, tilt=np.radians(10))
        except (IcpDiverged, NumericalFailure) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
            trace.append(rec)
            break
        if entry.grasp_label == spec.left_label:
            target_label, role = spec.right_label, "left"
        elif entry.grasp_label == spec.right_label:
            target_label, role = spec.left_label, "right"
        else:
            target_label, role = spec.left_label, "right"
        mapped = nonrigid.vertices[entry.draped_mesh.anchors[target_label]]
        nxt = int(cKDTree(hung.vertices).query(mapped)[1])
        left, right = (grasp, nxt) if role == "left" else (nxt, grasp)
        score = grasp_objective(spec, rest[left], rest[right])
        pair = (left, right)
        rec.update({
            "recognized_grasp": entry.grasp_label,
            "held_as": role,
            "mapped_anchor": target_label,
            "mapped_point": [float(c) for c in mapped],
            "next_vertex": nxt,
            "rigid_error": mesh_to_mesh_error(rigid, field_),
            "registration_error": mesh_to_mesh_error(nonrigid, field_),
            "energy": e.as_dict(),
            "left": left,
            "right": right,
            "score": float(score),
        })
        trace.append(rec)
        grasp = nxt
    return RegraspResult(pair[0], pair[1], float(score), float(xi), bool(score >= xi), trace)
