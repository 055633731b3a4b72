import numpy as np
import pytest

from drapekit.errors import NotWatertight, OutOfBounds
from drapekit.sdf import (DEFAULT_RESOLUTION, GridSpec, build_distance_field, build_signed_field,
                          load_field_arrays, query_closest, sample_signed, save_field, sign_field)
from drapekit.shapes import box, grid_sheet, icosphere
from drapekit.mesh import TriMesh

from oracles import brute_distance, ray_parity_inside


@pytest.fixture(scope="module")
def sphere():
    return icosphere(0.5, 3)


@pytest.fixture(scope="module")
def sphere_field(sphere):
    spec = GridSpec((64, 64, 64), 63 / 1.2, (-0.6, -0.6, -0.6))
    return build_signed_field(sphere, spec)


def test_default_resolution_constant():
    assert DEFAULT_RESOLUTION == 384


def test_center_distance_is_radius(sphere_field):
    h = sphere_field.spec.spacing
    _, d = query_closest(sphere_field, [0.0, 0.0, 0.0])
    assert abs(d - 0.5) <= h


def test_node_on_vertex_has_zero_distance():
    m = box([0, 0, 0], [0.5, 0.5, 0.5])
    spec = GridSpec((21, 21, 21), 20 / 1.0, (-0.25, -0.25, -0.25))
    f = build_distance_field(m, spec)
    idx = np.rint((np.array([0.0, 0.0, 0.0]) - spec.origin) * spec.resolution).astype(int)
    assert f.distance[tuple(idx)] == pytest.approx(0.0, abs=1e-12)


def test_minimality_against_a_vertex(sphere, sphere_field):
    spec = sphere_field.spec
    v = sphere.vertices[7]
    nodes = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), -1).reshape(-1, 3)
    pos = spec.node_positions(nodes)
    bound = np.linalg.norm(pos - v, axis=1)
    assert np.all(sphere_field.distance.reshape(-1) <= bound + 1e-12)


def test_stored_pairs_consistent(sphere_field):
    spec = sphere_field.spec
    nodes = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), -1).reshape(-1, 3)
    pos = spec.node_positions(nodes)
    cp = sphere_field.closest_point.reshape(-1, 3)
    gap = np.abs(np.linalg.norm(cp - pos, axis=1) - sphere_field.distance.reshape(-1))
    assert gap.max() <= 1.5 * np.sqrt(3) * spec.spacing


def test_eikonal_residual(sphere_field):
    d = sphere_field.distance
    g = np.gradient(d, sphere_field.spec.spacing)
    norm = np.sqrt(sum(gi**2 for gi in g))
    # nodes away from the surface and from the sphere center kink
    far = (d > 3 * sphere_field.spec.spacing) & (d < 0.4)
    inner = np.zeros_like(far)
    inner[1:-1, 1:-1, 1:-1] = True
    sel = far & inner
    assert np.all((norm[sel] > 0.8) & (norm[sel] < 1.2))


def test_signs_center_and_corner(sphere_field):
    assert sample_signed(sphere_field, [[0, 0, 0]])[0] < 0
    assert sphere_field.sign[0, 0, 0] == 1
    assert sphere_field.sign[-1, -1, -1] == 1


def test_sign_matches_ray_parity(sphere, sphere_field):
    rng = np.random.default_rng(0)
    spec = sphere_field.spec
    idx = rng.integers(0, spec.dims, size=(300, 3))
    checked = 0
    for i in idx:
        s = sphere_field.sign[tuple(i)]
        if s == 0:
            continue
        p = spec.node_positions(i)
        assert (s < 0) == ray_parity_inside(sphere, p)
        checked += 1
        if checked == 100:
            break
    assert checked == 100


def test_sign_independent_of_winding(sphere, sphere_field):
    flipped = TriMesh(sphere.vertices, sphere.triangles[:, ::-1])
    f = build_signed_field(flipped, sphere_field.spec)
    assert np.array_equal(f.sign, sphere_field.sign)


def test_open_mesh_not_watertight():
    sheet = grid_sheet(0.3, 0.3, 4, 4)
    f = build_distance_field(sheet, resolution=40)
    with pytest.raises(NotWatertight):
        sign_field(sheet, f)
    opened = build_signed_field(sheet, resolution=40, allow_open=True)
    assert set(np.unique(opened.sign)) <= {0, 1}


def test_mesh_outside_grid():
    with pytest.raises(OutOfBounds):
        build_distance_field(icosphere(1.0, 1), GridSpec((8, 8, 8), 10, (0, 0, 0)))


def test_query_outside_grid(sphere_field):
    with pytest.raises(OutOfBounds):
        query_closest(sphere_field, [5.0, 0, 0])
    _, d = query_closest(sphere_field, [5.0, 0, 0], clamp=True)
    assert np.isfinite(d)


def test_query_on_surface(sphere, sphere_field):
    p = sphere.barycenters[:50]
    _, d = query_closest(sphere_field, p)
    assert np.all(d < sphere_field.spec.spacing)


def test_query_at_node_matches_stored_pair(sphere_field):
    spec = sphere_field.spec
    i = (10, 40, 33)
    cp, d = query_closest(sphere_field, spec.node_positions(i))
    assert d <= sphere_field.distance[i] + 1e-12


def _probe_errors(mesh, field, probes):
    _, d = query_closest(field, probes)
    return np.abs(d - np.array([brute_distance(mesh, p) for p in probes]))


def test_random_queries_vs_brute_force(sphere, sphere_field):
    rng = np.random.default_rng(5)
    probes = rng.uniform(-0.55, 0.55, size=(200, 3))
    err = _probe_errors(sphere, sphere_field, probes)
    assert err.max() < 1.5 * np.sqrt(3) * sphere_field.spec.spacing


def test_refinement_does_not_increase_error():
    m = icosphere(0.3, 2)
    rng = np.random.default_rng(2)
    probes = rng.uniform(-0.35, 0.35, size=(100, 3))
    coarse = build_distance_field(m, GridSpec((17, 17, 17), 16 / 0.8, (-0.4, -0.4, -0.4)))
    fine = build_distance_field(m, GridSpec((33, 33, 33), 32 / 0.8, (-0.4, -0.4, -0.4)))
    assert _probe_errors(m, fine, probes).max() <= _probe_errors(m, coarse, probes).max() + 1e-15


def test_seeded_nodes_exact(sphere, sphere_field):
    spec = sphere_field.spec
    band = np.argwhere(sphere_field.distance < spec.spacing)[:40]
    for i in band:
        p = spec.node_positions(i)
        assert sphere_field.distance[tuple(i)] == pytest.approx(brute_distance(sphere, p), abs=1e-9)


def test_binary_dump_roundtrip(tmp_path, sphere_field):
    p = tmp_path / "f.sdf"
    save_field(sphere_field, p)
    spec, dist, sign = load_field_arrays(p)
    assert spec == sphere_field.spec
    np.testing.assert_allclose(dist, sphere_field.distance, rtol=1e-6)
    assert np.array_equal(sign, sphere_field.sign)
