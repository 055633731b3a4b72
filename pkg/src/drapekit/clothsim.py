"""Small implicit-Euler cloth simulator built on the shell energies.

Internal energy is ``stretch * E_area + shear * E_angle + bend * E_hinge``
measured against the input mesh as rest shape. Each step linearizes once
(Gauss-Newton stiffness ``2 J^T J``) and solves for the velocity change with
pinned DOFs prescribed. Contact with the table plane ``z = 0`` is part of
the solve, followed by Coulomb friction. Mass is lumped from rest triangle areas and
damping is proportional to mass.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded
from scipy.linalg.blas import dsbmv
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import CalibrationFailed, DomainError, SimDiverged
from .registration import rotation_about
from .mesh import TriMesh, layer_twins
from .shells import Shell, Weights, gn_assemble

log = logging.getLogger(__name__)

GRAVITY = 9.81


@dataclass(frozen=True)
class ClothParams:
    """Material and integration settings.

    stretch, shear : membrane stiffness in N/m (weights of the area and
        angle terms)
    bend : bending stiffness in N m (weight of the hinge term)
    density : kg per m^2 of mesh area
    damping : mass-proportional damping rate in 1/s
    friction : Coulomb coefficient against the table
    timestep : s
    """

    stretch: float = 100.0
    shear: float = 100.0
    bend: float = 1e-5
    density: float = 0.2
    damping: float = 1.0
    friction: float = 0.5
    timestep: float = 0.005

    def __post_init__(self):
        if min(self.stretch, self.shear, self.bend) < 0:
            raise DomainError("stiffness must be non-negative")
        if not self.density > 0:
            raise DomainError("density must be positive")
        if self.damping < 0 or self.friction < 0:
            raise DomainError("damping and friction must be non-negative")
        if not 0 < self.timestep <= 0.02:
            raise DomainError("timestep must lie in (0, 0.02]")

    def scaled(self, k):
        """Membrane stiffness multiplied by `k`."""
        return replace(self, stretch=self.stretch * k, shear=self.shear * k)


def _as_path(target):
    if callable(target):
        return target
    p = np.asarray(target, float).reshape(3)
    return lambda t: p


@dataclass
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0
    pins: dict = field(default_factory=dict)
    table: bool = False
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))

    def __post_init__(self):
        self.positions = np.array(self.positions, float)
        self.velocities = np.array(self.velocities, float)
        self.gravity = np.asarray(self.gravity, float)
        self.pins = {int(k): _as_path(p) for k, p in self.pins.items()}

    def copy(self):
        return SimState(self.positions.copy(), self.velocities.copy(), self.time, dict(self.pins),
                        self.table, self.gravity.copy())


class ClothModel:
    """Precomputed rest data for one mesh and parameter set.

    A two-sided mesh (see :func:`drapekit.mesh.mesh_from_contour`) is one
    physical cloth: only its first layer is integrated and the second layer
    is rebuilt each step at the rest offset along the vertex normals.

    DOFs are renumbered by reverse Cuthill-McKee so the implicit system is
    banded and can be solved with a banded Cholesky factorization.
    """

    def __init__(self, mesh, params):
        self.mesh = mesh
        self.params = params
        v = np.asarray(mesh.vertices, float)
        self.twins = layer_twins(mesh)
        if len(self.twins):
            k = len(self.twins)
            tri = mesh.triangles
            sheet = np.ascontiguousarray(tri[np.all(tri < k, axis=1)][:, ::-1])
        else:
            k = mesh.n_vertices
            sheet = np.asarray(mesh.triangles)
        self.k = n = k
        self.sheet = sheet
        self.shell = sh = Shell(TriMesh(v[:k], sheet, check=False))
        self.offset = 0.0
        if len(self.twins):
            d = v[k:] - v[:k]
            side = np.sign(np.sum(np.einsum("ij,ij->i", d, self.normals(v[:k]))))
            self.offset = float(side * np.linalg.norm(d[0]))
        m = np.zeros(n)
        np.add.at(m, sheet.ravel(), np.repeat(sh.rest_area * params.density / 3, 3))
        self.mass = m
        self.weights = Weights(params.stretch, params.shear, params.bend)

        pairs = [sheet[:, [a, b]] for a in range(3) for b in range(3) if a != b]
        if len(sh.hinges):
            pairs += [sh.hinges[:, [a, b]] for a in range(4) for b in range(4) if a != b]
        pr = np.concatenate(pairs)
        adj = sp.csr_matrix((np.ones(len(pr)), (pr[:, 0], pr[:, 1])), shape=(n, n))
        order = reverse_cuthill_mckee(adj, symmetric_mode=True).astype(np.int64)
        pos = np.empty(n, np.int64)
        pos[order] = np.arange(n)
        self.order, self.pos = order, pos
        bw = int(np.abs(pos[pr[:, 0]] - pos[pr[:, 1]]).max()) if len(pr) else 0
        self.u = 3 * bw + 2
        self.m3 = np.repeat(m[order], 3)  # permuted DOF order

    # --- layers

    def normals(self, xs):
        t = self.sheet
        fn = np.cross(xs[t[:, 1]] - xs[t[:, 0]], xs[t[:, 2]] - xs[t[:, 0]])
        vn = np.zeros_like(xs)
        for c in range(3):
            np.add.at(vn, t[:, c], fn)
        ln = np.linalg.norm(vn, axis=1)
        return vn / np.where(ln > 0, ln, 1.0)[:, None]

    def expand(self, xs, vs):
        """Full-mesh positions and velocities from the simulated layer."""
        if not len(self.twins):
            return xs, vs
        return np.vstack([xs, xs + self.offset * self.normals(xs)]), np.vstack([vs, vs])

    def grip(self, vertex):
        """Vertices held by a gripper closing on `vertex`: itself plus its
        twin on the other layer of a two-sided mesh."""
        vertex = int(vertex)
        if not len(self.twins):
            return [vertex]
        k = self.k
        return [vertex, vertex + k if vertex < k else vertex - k]

    def _layer_pins(self, state):
        k = self.k
        out = {}
        for w, f in state.pins.items():
            if w < k:
                out[w] = f
        for w, f in state.pins.items():
            if w >= k and (w - k) not in out:
                out[w - k] = _offset_path(f, state.positions[w - k] - state.positions[w])
        return out

    def center_of_mass(self, X):
        return np.average(np.asarray(X)[: self.k], axis=0, weights=self.mass)

    # --- energy

    def _assemble(self, x, hessian=True):
        sh, w = self.shell, self.weights
        n3 = 3 * self.k
        ab = np.zeros((self.u + 1, n3)) if hessian else np.zeros((1, 1))
        grad = np.zeros(n3)
        E = gn_assemble(x, sh.tri, sh.hinges, sh._sq_area, sh.rest_area, sh._sq_angle, sh.rest_angle,
                        sh._sq_hinge, sh.rest_dihedral, w.area, w.angle, w.hinge, self.pos, self.u,
                        ab, grad, hessian)
        return E, grad, ab

    def elastic_energy(self, x):
        xs = np.ascontiguousarray(np.asarray(x, float)[: self.k])
        return float(self._assemble(xs, hessian=False)[0])

    def energy(self, state):
        """Kinetic + elastic + gravitational energy (J) of the simulated layer."""
        x, v = state.positions[: self.k], state.velocities[: self.k]
        ke = 0.5 * float(np.sum(self.mass * np.einsum("ij,ij->i", v, v)))
        pe = -float(np.sum(self.mass * (x @ state.gravity)))
        return ke + self.elastic_energy(x) + pe

    # --- integration

    def _solve(self, A, b, fixed, dvp):
        if not len(fixed):
            return solveh_banded(A, b, lower=False, check_finite=False)
        A2 = A.copy()
        rhs = b - dsbmv(self.u, 1.0, A, dvp)
        _fix_rows(A2, self.u, fixed)
        rhs[fixed] = dvp[fixed]
        return solveh_banded(A2, rhs, lower=False, check_finite=False)

    def step(self, state, dt=None):
        p = self.params
        h = p.timestep if dt is None else dt
        if h > p.timestep * (1 + 1e-12) or h <= 0:
            raise DomainError("dt must lie in (0, params.timestep]")
        k = self.k
        x = np.ascontiguousarray(state.positions[:k])
        v = state.velocities[:k]
        u, order = self.u, self.order
        _, grad, K = self._assemble(x)
        vf = v[order].ravel()
        M = self.m3
        f = -grad + M * np.tile(state.gravity, k) - p.damping * M * vf
        b = h * (f - h * dsbmv(u, 1.0, K, vf))
        A = K
        A *= h * h
        A[u] += M * (1 + h * p.damping)

        lp = self._layer_pins(state)
        pinned = np.array(sorted(lp), dtype=np.int64)
        t1 = state.time + h
        target = {i: np.asarray(lp[i](t1), float) for i in pinned}
        pd = (3 * self.pos[pinned][:, None] + np.arange(3)).ravel()
        presc = np.zeros(3 * k)
        if len(pinned):
            presc[pd] = np.concatenate([(target[i] - x[i]) / h for i in pinned]) - vf[pd]
        free_v = np.ones(k, bool)
        free_v[pinned] = False

        # contacts enter as prescribed normal velocities; a contact whose
        # reaction pulls the cloth down is released and the system re-solved
        contact = np.zeros(k, bool)
        for _ in range(4):
            used = contact.copy()
            cidx = np.nonzero(contact)[0]
            cz = 3 * self.pos[cidx] + 2
            fixed = np.concatenate([pd, cz]).astype(np.int64)
            dvp = presc.copy()
            dvp[cz] = -x[cidx, 2] / h - vf[cz]
            dv = self._solve(A, b, fixed, dvp)
            v_new = np.empty_like(v)
            v_new[order] = (vf + dv).reshape(-1, 3)
            if not state.table:
                break
            react = np.zeros(k)
            if len(cidx):
                react[cidx] = (dsbmv(u, 1.0, A, dv) - b)[cz]
            pen = free_v & ~contact & (x[:, 2] + h * v_new[:, 2] < -1e-12)
            pull = contact & (react < 0)
            if not pen.any() and not pull.any():
                break
            contact = (contact | pen) & ~pull
        if not np.all(np.isfinite(v_new)):
            raise SimDiverged("non-finite velocities")
        if state.table and used.any():
            c = np.nonzero(used)[0]
            budget = p.friction * np.maximum(react[c], 0.0) / self.mass[c]
            vt = v_new[c, :2]
            speed = np.linalg.norm(vt, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                keep = np.where(speed > budget, 1 - budget / speed, 0.0)
            v_new[c, :2] = vt * keep[:, None]

        x_new = x + h * v_new
        for i in pinned:
            x_new[i] = target[i]
        if state.table:
            low = free_v & (x_new[:, 2] < 0)
            x_new[low, 2] = 0.0
        X, V = self.expand(x_new, v_new)
        if state.table and len(self.twins):
            X[k:, 2] = np.maximum(X[k:, 2], 0.0)
        for w, fn in state.pins.items():
            X[w] = fn(t1)
        if not np.all(np.isfinite(X)):
            raise SimDiverged("non-finite positions")
        return SimState(X, V, t1, state.pins, state.table, state.gravity)


def _fix_rows(ab, u, dofs):
    """Replace rows and columns `dofs` of a symmetric upper-banded matrix by identity."""
    n = ab.shape[1]
    for i in dofs:
        lo, hi = max(0, i - u), min(n - 1, i + u)
        ab[u + np.arange(lo, i + 1) - i, i] = 0.0  # column i, rows lo..i
        j = np.arange(i, hi + 1)
        ab[u + i - j, j] = 0.0  # row i, columns i..hi
        ab[u, i] = 1.0


@functools.lru_cache(maxsize=16)
def _model(mesh, params):
    return ClothModel(mesh, params)


def model(mesh, params):
    return _model(mesh, params)


def step(state, mesh, params, dt=None):
    """Advance `state` by one implicit step; `mesh` supplies the rest shape."""
    return model(mesh, params).step(state, dt)


def max_free_speed(state):
    v = np.linalg.norm(state.velocities, axis=1)
    if state.pins:
        v[list(state.pins)] = 0.0
    return float(v.max()) if len(v) else 0.0


def settle(cm, state, max_time=30.0, speed_tol=1e-3, hold=0.2, callback=None):
    """Step until the free-vertex speed stays below `speed_tol` for `hold` seconds.

    Returns ``(state, converged)``.
    """
    h = cm.params.timestep
    quiet = 0.0
    t_end = state.time + max_time
    while state.time < t_end - 1e-12:
        state = cm.step(state, min(h, t_end - state.time))
        if callback is not None:
            callback(state)
        if max_free_speed(state) < speed_tol:
            quiet += h
            if quiet >= hold - 1e-12:
                return state, True
        else:
            quiet = 0.0
    return state, False


# --------------------------------------------------------------------------
# hanging


def hang_pose(mesh, pin_vertex):
    """Rigidly place a flat garment in a vertical plane, pin at the origin and
    centroid straight below it."""
    v = np.asarray(mesh.vertices, float)
    c = v.mean(axis=0)
    n = np.sum(np.cross(v[mesh.triangles[:, 1]] - v[mesh.triangles[:, 0]],
                        v[mesh.triangles[:, 2]] - v[mesh.triangles[:, 0]]), axis=0)
    nn = np.linalg.norm(n)
    n = n / nn if nn > 0 else np.array([0.0, 0.0, 1.0])
    down = c - v[pin_vertex]
    down -= (down @ n) * n
    if np.linalg.norm(down) < 1e-12:
        down = np.cross(n, [1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.cross(n, [0.0, 1.0, 0.0])
    down /= np.linalg.norm(down)
    side = np.cross(down, n)
    # map (side, n, down) -> (x, y, -z)
    R = np.array([side, n, -down])
    return (v - v[pin_vertex]) @ R.T


def simulate_hang(mesh, pin_vertex, params=ClothParams(), max_time=30.0, return_info=False, callback=None):
    """Hang `mesh` from one vertex under gravity until quasi-static.

    The flat rest shape is placed in a vertical plane with a small
    deterministic out-of-plane ripple so the cloth can fold in 3-D.
    `callback` receives the :class:`SimState` after every step.
    """
    if not 0 <= pin_vertex < mesh.n_vertices:
        raise DomainError("pin vertex out of range")
    cm = model(mesh, params)
    x0 = hang_pose(mesh, pin_vertex)
    # smooth ripple, 1 mm amplitude, zero at the pin
    span = np.ptp(x0[:, 0]) or 1.0
    x0[:, 1] += 1e-3 * np.sin(2 * np.pi * x0[:, 0] / span) * (-x0[:, 2] / (np.ptp(x0[:, 2]) or 1.0))
    pins = {v: x0[v].copy() for v in cm.grip(pin_vertex)}
    state = SimState(x0, np.zeros_like(x0), pins=pins)
    state, ok = settle(cm, state, max_time=max_time, callback=callback)
    if not ok:
        log.warning("hang did not reach quasi-static state in %.1f s", max_time)
    out = mesh.with_vertices(state.positions)
    if return_info:
        return out, {"converged": ok, "time": state.time}
    return out


def hang_length(rest, hung, pin_vertex):
    """``(L1, L2, lowest)``: hung pin-to-lowest distance, the same pair's rest
    distance, and the lowest vertex id."""
    low = int(np.argmin(hung.vertices[:, 2]))
    L1 = float(np.linalg.norm(hung.vertices[low] - hung.vertices[pin_vertex]))
    L2 = float(np.linalg.norm(rest.vertices[low] - rest.vertices[pin_vertex]))
    return L1, L2, low


def shear_fraction(mesh, pin_vertex, params):
    hung = simulate_hang(mesh, pin_vertex, params)
    L1, L2, _ = hang_length(mesh, hung, pin_vertex)
    return (L1 - L2) / L2


def calibrate_shear(mesh, pin_vertex, target, params=ClothParams(), bracket=(1e-1, 1e5), rtol=0.05, max_iter=40):
    """Membrane stiffness giving hang stretch fraction `target`.

    Stretch and shear stiffness are scaled together (ratio from `params`);
    bisection runs on the log of the stretch stiffness. Returns the
    calibrated stretch stiffness.
    """
    if not 0.001 <= target <= 0.2:
        raise DomainError("target shear fraction must lie in [0.001, 0.2]")
    ratio = params.shear / params.stretch if params.stretch > 0 else 1.0

    def frac(k):
        return shear_fraction(mesh, pin_vertex, replace(params, stretch=k, shear=k * ratio))

    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    f_lo, f_hi = frac(np.exp(lo)), frac(np.exp(hi))
    if not (f_hi <= target <= f_lo):
        raise CalibrationFailed(f"target {target:.4f} outside bracket [{f_hi:.4f}, {f_lo:.4f}]")
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = frac(np.exp(mid))
        if best is None or abs(f - target) < abs(best[1] - target):
            best = (np.exp(mid), f)
        if abs(f - target) <= rtol * target:
            return float(np.exp(mid))
        if f > target:  # too soft
            lo = mid
        else:
            hi = mid
    if abs(best[1] - target) <= 0.1 * target:
        return float(best[0])
    raise CalibrationFailed("bisection did not reach the target")


# --------------------------------------------------------------------------
# table and friction


def tilted_gravity(angle_deg, axis=(1.0, 0.0, 0.0)):
    """Gravity vector for a table tilted by `angle_deg` (downhill along -y)."""
    R = rotation_about(axis, np.radians(angle_deg))
    return R.T @ np.array([0.0, 0.0, -GRAVITY])


def flat_on_table(mesh):
    """Vertices shifted so the lowest point touches ``z = 0``."""
    v = np.array(mesh.vertices, float)
    v[:, 2] -= v[:, 2].min()
    return v


def slides(mesh, params, angle_deg, duration=2.0, threshold=5e-3):
    """True if the cloth's center of mass moves more than `threshold` within
    `duration` seconds on a table tilted by `angle_deg`."""
    cm = model(mesh, params)
    x0 = flat_on_table(mesh)
    state = SimState(x0, np.zeros_like(x0), table=True, gravity=tilted_gravity(angle_deg))
    c0 = cm.center_of_mass(x0)
    steps = int(round(duration / params.timestep))
    for _ in range(steps):
        state = cm.step(state)
        c = cm.center_of_mass(state.positions)
        if np.linalg.norm((c - c0)[:2]) > threshold:
            return True
    return False


def onset_angle(mesh, params, lo=0.0, hi=60.0, tol=0.25):
    """Smallest tilt (deg) at which the cloth slides, by bisection."""
    if slides(mesh, params, lo):
        return lo
    if not slides(mesh, params, hi):
        raise CalibrationFailed("no slide below the upper angle")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if slides(mesh, params, mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def calibrate_friction(mesh, target_angle_deg, params=ClothParams(), bracket=(0.0, 2.0), tol=1e-3, max_iter=30):
    """Friction coefficient at which sliding starts at `target_angle_deg`."""
    if not 5 < target_angle_deg < 45:
        raise DomainError("target angle must lie in (5, 45) degrees")
    lo, hi = bracket
    if not slides(mesh, replace(params, friction=lo), target_angle_deg):
        raise CalibrationFailed("cloth holds even at the lowest friction")
    if slides(mesh, replace(params, friction=hi), target_angle_deg):
        raise CalibrationFailed("cloth slides even at the highest friction")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if slides(mesh, replace(params, friction=mid), target_angle_deg):
            lo = mid
        else:
            hi = mid
    return float(hi)


# --------------------------------------------------------------------------
# folding


def _offset_path(f, off):
    return lambda t: f(t) + off


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def simulate_fold(mesh, trajectories, params=ClothParams(), settle_time=3.0, start=None,
                  keyframes=None, return_info=False):
    """Drive pinned vertices along curves, release, and let the cloth settle.

    Parameters
    ----------
    mesh : TriMesh
        Rest shape, also the start pose unless `start` is given; placed so
        its lowest point is on the table.
    trajectories : list of (vertex, curve, duration)
        `curve` is any callable ``u -> point`` on ``[0, 1]``; the pin
        follows ``curve(smoothstep(t / duration))``.
    keyframes : list, optional
        Receives ``(time, positions)`` snapshots every 0.1 s.
    """
    verts = [int(v) for v, _, _ in trajectories]
    if len(set(verts)) != len(verts):
        raise DomainError("pins must be distinct")
    for _, _, d in trajectories:
        if not d > 0:
            raise DomainError("durations must be positive")
    cm = model(mesh, params)
    x0 = flat_on_table(mesh) if start is None else np.array(start, float)

    def path(curve, d):
        return lambda t: np.asarray(curve(float(smoothstep(t / d))), float)

    pins = {}
    for v, c, d in trajectories:
        for w in cm.grip(v):
            pins[w] = path(c, d) if w == v else _offset_path(path(c, d), x0[w] - x0[v])
    state = SimState(x0, np.zeros_like(x0), pins=pins, table=True)
    t_move = max((d for _, _, d in trajectories), default=0.0)
    h = params.timestep
    snap_every = max(1, int(round(0.1 / h)))
    i = 0
    while state.time < t_move - 1e-12:
        state = cm.step(state, min(h, t_move - state.time))
        i += 1
        if keyframes is not None and i % snap_every == 0:
            keyframes.append((state.time, state.positions.copy()))
    state.pins = {}
    state, ok = settle(cm, state, max_time=settle_time)
    if keyframes is not None:
        keyframes.append((state.time, state.positions.copy()))
    out = mesh.with_vertices(state.positions)
    if return_info:
        return out, {"settled": ok, "time": state.time}
    return out
