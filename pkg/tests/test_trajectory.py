import numpy as np
import pytest

from drapekit.clothsim import flat_on_table
from drapekit.errors import DegenerateTask, DomainError
from drapekit.fixtures import garment_mesh, towel
from drapekit.shapes import grid_sheet
from drapekit.trajectory import (Arm, BezierCurve, FoldTask, arc_length, bezier_eval, dissimilarity, fold_target,
                                 fold_task, init_trajectory, mirror_point, optimize_trajectory, simulate_curves,
                                 trajectory_cost)

from oracles import polyline_length

EXAMPLE = BezierCurve([(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)])


def random_curve(rng):
    return BezierCurve(rng.uniform(-1, 1, (4, 3)))


# --------------------------------------------------------------------------
# curves


def test_endpoint_interpolation():
    rng = np.random.default_rng(0)
    c = random_curve(rng)
    np.testing.assert_array_equal(bezier_eval(c, 0.0), c.points[0])
    np.testing.assert_array_equal(bezier_eval(c, 1.0), c.points[3])


def test_constant_curve():
    c = BezierCurve(np.tile([0.1, 0.2, 0.3], (4, 1)))
    for u in np.linspace(0, 1, 7):
        np.testing.assert_allclose(c(u), [0.1, 0.2, 0.3], atol=1e-15)


def test_bernstein_hand_example():
    np.testing.assert_allclose(bezier_eval(EXAMPLE, 0.5), [0.5, 0.75, 0.0], atol=1e-15)


def test_parameter_domain():
    with pytest.raises(DomainError):
        bezier_eval(EXAMPLE, 1.01)
    with pytest.raises(DomainError):
        BezierCurve([[np.nan, 0, 0]] + [[0, 0, 0]] * 3)


def test_split_agrees_with_bernstein():
    rng = np.random.default_rng(1)
    for _ in range(10):
        c = random_curve(rng)
        u = rng.uniform(0.05, 0.95)
        left, right = c.split(u)
        np.testing.assert_allclose(left.points[3], c(u), atol=1e-12)
        for s in (0.25, 0.7):
            np.testing.assert_allclose(left(s), c(s * u), atol=1e-12)
            np.testing.assert_allclose(right(s), c(u + s * (1 - u)), atol=1e-12)


def test_straight_line_length_exact():
    c = BezierCurve([(0, 0, 0), (0.2, 0, 0), (0.7, 0, 0), (1, 0, 0)])
    assert abs(arc_length(c) - 1.0) < 1e-12


def test_point_curve_length_zero():
    assert arc_length(BezierCurve(np.ones((4, 3)))) == 0.0


def test_length_vs_dense_polyline():
    ref = polyline_length(EXAMPLE)
    assert abs(arc_length(EXAMPLE) - ref) <= 1e-5 * ref


def test_subdivision_invariance():
    rng = np.random.default_rng(2)
    c = random_curve(rng)
    left, right = c.split(0.3)
    assert arc_length(left) + arc_length(right) == pytest.approx(arc_length(c), abs=2e-6)


def test_length_domain():
    with pytest.raises(DomainError):
        arc_length(EXAMPLE, tol=0.0)


# --------------------------------------------------------------------------
# initialization


def test_init_formula():
    c = init_trajectory((0, 0, 0), (0.9, 0, 0))
    np.testing.assert_allclose(c.points[1], [0.3, 0, 0.3], atol=1e-15)
    np.testing.assert_allclose(c.points[2], [0.6, 0, 0.3], atol=1e-15)


def test_init_symmetric_under_reversal():
    a, b = np.array([0.1, 0.2, 0.0]), np.array([0.5, -0.1, 0.05])
    f, r = init_trajectory(a, b), init_trajectory(b, a)
    for u in np.linspace(0, 1, 9):
        np.testing.assert_allclose(f(u), r(1 - u), atol=1e-15)


def test_init_flat_is_straight():
    a, b = np.array([0.1, 0.2, 0.0]), np.array([0.5, -0.1, 0.05])
    assert arc_length(init_trajectory(a, b, h=0.0)) == pytest.approx(np.linalg.norm(a - b), abs=1e-12)


def test_init_degenerate():
    with pytest.raises(DegenerateTask):
        init_trajectory((1, 2, 3), (1, 2, 3))


# --------------------------------------------------------------------------
# dissimilarity


def test_dissimilarity_identity_and_translation():
    s = grid_sheet(0.4, 0.2, 9, 5)
    assert dissimilarity(s, s) == 0.0
    d = np.array([0.003, -0.002, 0.01])
    moved = s.with_vertices(s.vertices + d)
    assert abs(dissimilarity(s, moved) - np.linalg.norm(d)) < 1e-12


def test_dissimilarity_quadrant_offset():
    s = grid_sheet(0.4, 0.4, 9, 9)
    # offset every vertex of one quadrant, so only triangles inside it move
    v = np.array(s.vertices)
    quad = (v[:, 0] <= 0.2 + 1e-12) & (v[:, 1] <= 0.2 + 1e-12)
    tri_in = np.all(quad[s.triangles], axis=1)
    tri_touch = np.any(quad[s.triangles], axis=1) & ~tri_in
    v[quad, 2] += 0.004
    moved = s.with_vertices(v)
    A = s.areas
    # boundary triangles move by the barycenter share of offset vertices
    share = quad[s.triangles].sum(axis=1) / 3.0
    expected = 0.004 * (A[tri_in].sum() + (share[tri_touch] * A[tri_touch]).sum()) / A.sum()
    assert abs(dissimilarity(s, moved) - expected) < 1e-9
    assert A[tri_in].sum() / A.sum() == pytest.approx(0.25)


def test_dissimilarity_pseudometric():
    rng = np.random.default_rng(3)
    s = grid_sheet(0.2, 0.2, 4, 4)
    for _ in range(20):
        a, b, c = (s.with_vertices(s.vertices + rng.normal(0, 0.01, s.vertices.shape)) for _ in range(3))
        assert dissimilarity(a, b) <= dissimilarity(a, c) + dissimilarity(c, b) + 1e-9
        t = rng.normal(0, 0.01, 3)
        assert dissimilarity(a, a.with_vertices(a.vertices + t)) == pytest.approx(
            dissimilarity(a.with_vertices(a.vertices + t), a), abs=1e-15)


def test_dissimilarity_connectivity_mismatch():
    with pytest.raises(DomainError):
        dissimilarity(grid_sheet(0.2, 0.2, 4, 4), grid_sheet(0.2, 0.2, 5, 4))


# --------------------------------------------------------------------------
# fold geometry


def test_mirror_point():
    p = mirror_point([0.3, 0.1, 0.0], (0.2, 0.0), (0.0, 1.0), z=0.01)
    np.testing.assert_allclose(p, [0.1, 0.1, 0.01], atol=1e-15)


def test_fold_target_reflects_moving_side():
    m = garment_mesh(towel())
    x0 = flat_on_table(m)
    t = fold_target(m, (0.2, 0.0), (0.0, 1.0), m.anchors["corner_b"])
    moving = x0[:, 0] > 0.2
    np.testing.assert_allclose(t.vertices[moving, 0], 0.4 - x0[moving, 0], atol=1e-12)
    np.testing.assert_array_equal(t.vertices[~moving], x0[~moving])
    assert np.all(t.vertices[moving, 2] >= x0[:, 2].max() - 1e-12)
    sheet = grid_sheet(0.4, 0.2, 3, 3)
    on_line = int(np.nonzero(np.isclose(sheet.vertices[:, 0], 0.2))[0][0])
    with pytest.raises(DegenerateTask):
        fold_target(sheet, (0.2, 0.0), (0.0, 1.0), on_line)


def test_fold_task_validation():
    m = garment_mesh(towel())
    a = Arm(0, m.vertices[0], m.vertices[1])
    with pytest.raises(DomainError):
        FoldTask(m, [a, a], m)
    with pytest.raises(DomainError):
        FoldTask(m, [], m)
    with pytest.raises(DomainError):
        FoldTask(m, [a], grid_sheet(0.1, 0.1, 3, 3))
    with pytest.raises(DomainError):
        FoldTask(m, [a], m, alpha=-1)


# --------------------------------------------------------------------------
# cost and optimizer (short simulations)

FAST = dict(duration=1.0, settle_time=0.5)


@pytest.fixture(scope="module")
def corner_task():
    m = garment_mesh(towel())
    return fold_task(m, [m.anchors["corner_b"]], (0.2, 0.0), (0.0, 1.0), **FAST)


def test_cost_self_consistency(corner_task):
    x = corner_task.initial_x()
    reached = simulate_curves(corner_task, corner_task.curves(x))
    task = FoldTask(corner_task.mesh, corner_task.arms, reached, **FAST)
    c, length, d = trajectory_cost(task, x)
    assert d == 0.0
    assert c == length == arc_length(task.curves(x)[0])


def test_cost_domain(corner_task):
    with pytest.raises(DomainError):
        trajectory_cost(corner_task, np.zeros(5))


def test_optimizer_at_optimum_stops_quickly(corner_task):
    x = corner_task.initial_x()
    reached = simulate_curves(corner_task, corner_task.curves(x))
    task = FoldTask(corner_task.mesh, corner_task.arms, reached, max_iter=2, **FAST)
    res = optimize_trajectory(task)
    assert res.initial_dissimilarity < 1e-4
    assert len(res.log) - 1 <= 2
    moved = np.abs(res.curves[0].points - task.curves(x)[0].points).max()
    assert moved < 0.05
    assert res.cost <= res.initial_cost


def test_zero_alpha_shortens_the_arc(corner_task):
    task = FoldTask(corner_task.mesh, corner_task.arms, corner_task.target, alpha=0.0, max_iter=25, **FAST)
    res = optimize_trajectory(task)
    init = init_trajectory(task.arms[0].start, task.arms[0].target)
    assert res.length < arc_length(init)
    # the arc comes down toward the straight path
    assert res.curves[0].points[1:3, 2].max() < init.points[1:3, 2].max()
    costs = [e["cost"] for e in res.log if e["accepted"]]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
