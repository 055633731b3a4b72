"""Cubic Bezier fold trajectories and their optimization against the simulator.

A fold moves one or two grasped vertices from their start points ``P0`` to
targets ``P3`` along cubic Bezier curves. Only the inner control points
``P1, P2`` are free; the cost of a candidate is

    C(x) = l_x + alpha * D(S_t, S_x)

with ``l_x`` the summed arc length and ``D`` the area-weighted barycenter
distance between the desired folded shape ``S_t`` and the simulated result
``S_x``. ``C`` is minimized by Levenberg-Marquardt on residual components whose
squares sum to ``C``, with forward-difference Jacobians.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .clothsim import ClothParams, flat_on_table, simulate_fold
from .errors import DegenerateTask, DomainError, NumericalFailure, OptimizationStalled, SimDiverged
from .lm import levenberg_marquardt
from .mesh import TriMesh

log = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])

_BINOM = np.array([1.0, 3.0, 3.0, 1.0])


@dataclass(frozen=True, eq=False)
class BezierCurve:
    """Cubic Bezier curve with control points ``P0..P3`` (rows, meters)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, float).reshape(4, 3)
        if not np.all(np.isfinite(p)):
            raise DomainError("control points must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __call__(self, u):
        return bezier_eval(self, u)

    @property
    def inner(self):
        return self.points[1:3].ravel().copy()

    def with_inner(self, x):
        p = self.points.copy()
        p[1:3] = np.asarray(x, float).reshape(2, 3)
        return BezierCurve(p)

    def split(self, u=0.5):
        """De Casteljau subdivision into the pieces on ``[0, u]`` and ``[u, 1]``."""
        left, right = _split(self.points, u)
        return BezierCurve(left), BezierCurve(right)

    def to_json(self):
        return self.points.tolist()


def _split(p, u):
    a = (1 - u) * p[:-1] + u * p[1:]
    b = (1 - u) * a[:-1] + u * a[1:]
    c = (1 - u) * b[0] + u * b[1]
    return np.array([p[0], a[0], b[0], c]), np.array([c, b[1], a[2], p[3]])


def bezier_eval(curve, u):
    """Point(s) on `curve` at parameter(s) `u` in ``[0, 1]`` (Bernstein form)."""
    u_arr = np.asarray(u, float)
    if np.any(~np.isfinite(u_arr)) or np.any(u_arr < 0) or np.any(u_arr > 1):
        raise DomainError("u must lie in [0, 1]")
    k = np.arange(4)
    uu = u_arr[..., None]
    B = _BINOM * uu**k * (1 - uu) ** (3 - k)
    return B @ curve.points


def arc_length(curve, tol=1e-6):
    """Length by recursive De Casteljau halving.

    A piece covering a share ``s`` of the parameter range is accepted once
    its control polygon exceeds its chord by less than ``s * tol``; the
    result is the sum of accepted chords, so the total error stays below
    `tol`.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    total = 0.0
    p = curve.points[None]
    share = 1.0
    while len(p):
        chord = np.linalg.norm(p[:, 3] - p[:, 0], axis=1)
        poly = np.linalg.norm(np.diff(p, axis=1), axis=2).sum(axis=1)
        done = poly - chord < share * tol
        total += float(np.sum(chord[done]))
        p = p[~done]
        a = 0.5 * (p[:, :-1] + p[:, 1:])
        b = 0.5 * (a[:, :-1] + a[:, 1:])
        c = 0.5 * (b[:, 0] + b[:, 1])
        left = np.stack([p[:, 0], a[:, 0], b[:, 0], c], axis=1)
        right = np.stack([c, b[:, 1], a[:, 2], p[:, 3]], axis=1)
        p = np.concatenate([left, right])
        share /= 2
    return total


def dissimilarity(target, shape):
    """Area-weighted mean distance between corresponding triangle barycenters.

    Weights are the triangle areas of `target`; correspondence is by
    triangle index.
    """
    if target.n_vertices != shape.n_vertices or not np.array_equal(target.triangles, shape.triangles):
        raise DomainError("shapes must share connectivity")
    A = target.areas
    d = np.linalg.norm(shape.barycenters - target.barycenters, axis=1)
    return float(np.sum(d * A) / np.sum(A))


def init_trajectory(P0, P3, h=1.0 / 3.0, up=UP):
    """Arc that lifts by ``h * |P0 - P3|`` over the straight path."""
    P0, P3 = np.asarray(P0, float), np.asarray(P3, float)
    d = float(np.linalg.norm(P0 - P3))
    if d == 0.0:
        raise DegenerateTask("start and target coincide")
    lift = h * d * np.asarray(up, float)
    return BezierCurve([P0, 2 / 3 * P0 + 1 / 3 * P3 + lift, 1 / 3 * P0 + 2 / 3 * P3 + lift, P3])


# --------------------------------------------------------------------------
# fold tasks


@dataclass(frozen=True)
class Arm:
    """One gripper: grasped vertex and its start and target positions."""

    vertex: int
    start: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertex", int(self.vertex))
        object.__setattr__(self, "start", np.asarray(self.start, float).reshape(3))
        object.__setattr__(self, "target", np.asarray(self.target, float).reshape(3))


@dataclass(frozen=True, eq=False)
class FoldTask:
    """Everything needed to score a fold trajectory.

    duration : seconds the grippers take along their curves
    xtol : the optimizer stops when a rejected step moves the control points
        by less than this (m)
    settle_time : seconds simulated after release
    start_positions : initial vertex positions; default is `mesh` laid flat
        on the table
    """

    mesh: TriMesh
    arms: tuple
    target: TriMesh
    alpha: float = 1e3
    delta: float = 0.1
    params: ClothParams = ClothParams()
    duration: float = 2.0
    settle_time: float = 3.0
    max_iter: int = 50
    rtol: float = 1e-4
    xtol: float = 1e-3
    h: float = 1.0 / 3.0
    jobs: int = 1
    start_positions: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        if not self.arms:
            raise DomainError("a fold needs at least one arm")
        if len({a.vertex for a in self.arms}) != len(self.arms):
            raise DomainError("arms must grasp distinct vertices")
        if not np.array_equal(self.mesh.triangles, self.target.triangles) or \
                self.mesh.n_vertices != self.target.n_vertices:
            raise DomainError("target shape must share the garment's connectivity")
        if not self.alpha >= 0:
            raise DomainError("alpha must be non-negative")
        if not self.delta > 0:
            raise DomainError("delta must be positive")

    @property
    def n_params(self):
        return 6 * len(self.arms)

    def curves(self, x):
        x = np.asarray(x, float).reshape(len(self.arms), 6)
        return [BezierCurve([a.start, xi[:3], xi[3:], a.target]) for a, xi in zip(self.arms, x)]

    def initial_x(self):
        return np.concatenate([init_trajectory(a.start, a.target, self.h).inner for a in self.arms])

    def start(self):
        if self.start_positions is not None:
            return np.asarray(self.start_positions, float)
        return flat_on_table(self.mesh)


def simulate_curves(task, curves, keyframes=None):
    traj = [(a.vertex, c, task.duration) for a, c in zip(task.arms, curves)]
    return simulate_fold(task.mesh, traj, task.params, settle_time=task.settle_time,
                         start=task.start(), keyframes=keyframes)


def _evaluate(task, x):
    x = np.asarray(x, float)
    if x.shape != (task.n_params,) or not np.all(np.isfinite(x)):
        raise DomainError(f"x must be {task.n_params} finite numbers")
    curves = task.curves(x)
    length = float(sum(arc_length(c) for c in curves))
    try:
        shape = simulate_curves(task, curves)
    except SimDiverged as exc:
        log.info("candidate infeasible: %s", exc)
        return np.inf, length, np.inf, None
    A = task.target.areas
    di = np.linalg.norm(shape.barycenters - task.target.barycenters, axis=1)
    d = float(np.sum(di * A) / np.sum(A))
    # squared components sum to C: one for the length, one per triangle
    r = np.sqrt(np.concatenate([[length], task.alpha * di * A / np.sum(A)]))
    return length + task.alpha * d, length, d, r


def trajectory_cost(task, x):
    """``(cost, length, dissimilarity)`` of the inner control points `x`.

    A diverging simulation gives ``cost = dissimilarity = inf``.
    """
    return _evaluate(task, x)[:3]


def cost_components(task, x):
    """Residual vector whose squared norm is the cost: ``sqrt(l_x)`` and
    ``sqrt(alpha A_i d_i / sum A)`` per target triangle; ``inf`` entries when
    the simulation diverges."""
    r = _evaluate(task, x)[3]
    return np.full(task.target.n_triangles + 1, np.inf) if r is None else r


def _evaluate_args(args):
    return _evaluate(*args)


@dataclass
class OptimizationResult:
    curves: list
    cost: float
    initial_cost: float
    length: float
    dissimilarity: float
    initial_dissimilarity: float
    log: list = field(default_factory=list)
    reason: str = ""

    def to_json(self):
        return {"curves": [c.to_json() for c in self.curves], "cost": self.cost,
                "initial_cost": self.initial_cost, "length": self.length,
                "dissimilarity": self.dissimilarity, "initial_dissimilarity": self.initial_dissimilarity,
                "reason": self.reason, "log": self.log}


class _Evaluator:
    """Memoized evaluations, with an optional process pool for batches."""

    def __init__(self, task):
        self.task = task
        self.cache = {}

    def key(self, x):
        return np.asarray(x, float).tobytes()

    def many(self, xs):
        todo = []
        for x in xs:
            if self.key(x) not in self.cache and all(self.key(x) != self.key(t) for t in todo):
                todo.append(x)
        if self.task.jobs > 1 and len(todo) > 1:
            serial = replace(self.task, jobs=1)
            with ProcessPoolExecutor(max_workers=self.task.jobs) as pool:
                out = list(pool.map(_evaluate_args, [(serial, x) for x in todo]))
        else:
            out = [_evaluate(self.task, x) for x in todo]
        for x, o in zip(todo, out):
            self.cache[self.key(x)] = o
        return [self.cache[self.key(x)] for x in xs]

    def __call__(self, x):
        return self.many([x])[0]

    def residual(self, x):
        r = self(x)[3]
        return np.full(self.task.target.n_triangles + 1, np.inf) if r is None else r


def optimize_trajectory(task, x0=None, callback=None):
    """Secant Levenberg-Marquardt over the inner control points of every arm.

    The least-squares residual is :func:`cost_components`, so the
    objective is ``C`` itself. Its Jacobian is taken by forward differences
    with step ``task.delta`` (backward where the forward sample is
    infeasible, zero where both are); the samples of one Jacobian are
    independent and run on ``task.jobs`` workers.

    Returns an :class:`OptimizationResult`. Raises
    :class:`OptimizationStalled` (best-so-far result in ``.best``) when the
    start is infeasible or every trial step is infeasible.
    """
    ev = _Evaluator(task)
    x0 = task.initial_x() if x0 is None else np.asarray(x0, float)
    c0, l0, d0, _ = ev(x0)
    entries = []

    def jacobian(x, r):
        n = len(x)
        E = task.delta * np.eye(n)
        fwd = ev.many([x + E[j] for j in range(n)])
        back_idx = [j for j in range(n) if fwd[j][3] is None]
        back = dict(zip(back_idx, ev.many([x - E[j] for j in back_idx])))
        J = np.zeros((len(r), n))
        for j in range(n):
            if fwd[j][3] is not None:
                J[:, j] = (fwd[j][3] - r) / task.delta
            elif back[j][3] is not None:
                J[:, j] = (r - back[j][3]) / task.delta
        return J

    def record(e):
        entries.append(e)
        if callback is not None:
            callback(e)

    def result(x, reason):
        c, l, d, _ = ev(x)
        return OptimizationResult(task.curves(x), float(c), float(c0), float(l), float(d), float(d0),
                                  _log(entries, c0, l0, d0), reason)

    if not np.isfinite(c0):
        raise OptimizationStalled("initial trajectory is infeasible", best=result(x0, "infeasible start"))
    try:
        res = levenberg_marquardt(ev.residual, x0, jacobian, max_iter=task.max_iter, rtol=task.rtol,
                                  max_mu=1e12, xtol=task.xtol, callback=record)
    except NumericalFailure as exc:
        raise OptimizationStalled(str(exc), best=result(x0, "numerical failure")) from exc
    out = result(res.x, res.reason)
    if res.accepted == 0 and entries and all(not np.isfinite(e["trial"]) for e in entries):
        raise OptimizationStalled("every candidate step was infeasible", best=out)
    return out


def _log(entries, c0, l0, d0):
    out = [{"iter": 0, "cost": float(c0), "length": float(l0), "dissimilarity": float(d0), "accepted": True}]
    for e in entries:
        out.append({"iter": e["iter"], "cost": float(e["cost"]), "trial_cost": float(e["trial"]),
                    "accepted": e["accepted"], "mu": e["mu"]})
    return out


# --------------------------------------------------------------------------
# fold targets


def fold_target(mesh, point, direction, moving_vertex, start=None):
    """Perfect fold of a flat garment: vertices on the side of the fold line
    holding `moving_vertex` are reflected across the line and flipped on top.

    `point` and `direction` define the fold line in the table plane.
    """
    x = flat_on_table(mesh) if start is None else np.array(start, float)
    p = np.asarray(point, float)[:2]
    d = np.asarray(direction, float)[:2]
    d = d / np.linalg.norm(d)
    n = np.array([-d[1], d[0]])
    s = (x[:, :2] - p) @ n
    side = np.sign(s[moving_vertex])
    if side == 0:
        raise DegenerateTask("moving vertex lies on the fold line")
    moving = s * side > 0
    out = x.copy()
    out[moving, :2] -= 2 * s[moving, None] * n
    top = x[:, 2].max()
    out[moving, 2] = 2 * top - x[moving, 2]
    return mesh.with_vertices(out)


def mirror_point(point, line_point, direction, z=None):
    p = np.asarray(point, float).copy()
    d = np.asarray(direction, float)[:2]
    d = d / np.linalg.norm(d)
    n = np.array([-d[1], d[0]])
    s = (p[:2] - np.asarray(line_point, float)[:2]) @ n
    p[:2] -= 2 * s * n
    if z is not None:
        p[2] = z
    return p


def fold_task(mesh, vertices, line_point, direction, **kw):
    """Fold task grasping `vertices` and carrying them to their mirror images."""
    x = flat_on_table(mesh) if kw.get("start_positions") is None else np.asarray(kw["start_positions"], float)
    target = fold_target(mesh, line_point, direction, vertices[0], start=x)
    arms = [Arm(v, x[v], target.vertices[v]) for v in vertices]
    return FoldTask(mesh, arms, target, **kw)
