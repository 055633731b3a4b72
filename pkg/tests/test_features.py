import numpy as np
import pytest

from drapekit.errors import DomainError, InvalidMesh
from drapekit.features import (BinaryFeature, FeatureParams, cell_centers, extract_feature, hamming, load_feature,
                               rotate_sectors, rotation_distance, save_feature)
from drapekit.mesh import TriMesh
from drapekit.registration import rotation_about
from drapekit.sdf import GridSpec, build_distance_field, build_signed_field
from drapekit.shapes import box, cylinder, icosphere

from oracles import naive_rotation_distance

P = FeatureParams()


def random_feature(rng, params=P):
    return BinaryFeature.from_bits(rng.integers(0, 2, params.size), params)


def test_default_size():
    assert (P.layers, P.rings, P.sectors) == (16, 16, 16)
    assert P.size == 4096


def test_params_limit():
    with pytest.raises(ValueError):
        FeatureParams(1024, 1024, 2)


def test_bit_layout_little_endian():
    bits = np.zeros(P.size, np.uint8)
    layer, ring, sector = 2, 5, 7
    k = (layer * P.rings + ring) * P.sectors + sector
    bits[k] = 1
    f = BinaryFeature.from_bits(bits, P)
    assert f.words[k // 64] == np.uint64(1) << np.uint64(k % 64)
    assert f.grid()[layer, ring, sector] == 1


def test_file_roundtrip_and_header(tmp_path):
    f = random_feature(np.random.default_rng(0))
    p = tmp_path / "a.feat"
    save_feature(f, p)
    raw = p.read_bytes()
    assert np.frombuffer(raw[:12], "<u4").tolist() == [16, 16, 16]
    assert len(raw) == 12 + 8 * 64
    assert load_feature(p) == f


def test_solid_cylinder_all_ones():
    m = cylinder(0.1, 0.0, 0.3, segments=32, rings=6)
    field = build_signed_field(m, resolution=200)
    f = extract_feature(field, m)
    assert f.count() == P.size


def test_far_region_all_zeros():
    shape = box([0, 0, 0], [0.1, 0.1, 0.2])
    far = icosphere(0.05, 1, center=(0.6, 0.6, 0.6))
    spec = GridSpec((80, 80, 80), 100, (-0.1, -0.1, -0.1))
    field = build_signed_field(far, spec)
    assert extract_feature(field, shape).count() == 0


def test_half_box_matches_point_in_box_oracle():
    lo, hi = np.array([0.0, -0.1, 0.0]), np.array([0.1, 0.1, 0.3])
    m = box(lo, hi, divisions=2)
    field = build_signed_field(m, resolution=300)
    origin = (0.0, 0.0)
    f = extract_feature(field, m, origin=origin)
    pts, _ = cell_centers(m, P, origin=origin)
    oracle = np.all((pts >= lo) & (pts <= hi), axis=-1).ravel()
    agree = np.mean(oracle == f.bits.astype(bool))
    assert agree >= 0.98
    # the occupied cells cover roughly half the sectors
    assert 0.35 < f.bits.mean() < 0.65


def test_symmetric_mesh_rotation_bit_identical():
    m = cylinder(0.1, 0.0, 0.3, segments=16, rings=3)
    R = rotation_about([0, 0, 1], 2 * np.pi / 16)
    rot = m.with_vertices(m.vertices @ R.T)
    spec = GridSpec((80, 80, 110), 300, (-0.13, -0.13, -0.03))
    a = extract_feature(build_signed_field(m, spec), m, shell=0.005)
    b = extract_feature(build_signed_field(rot, spec), rot, shell=0.005)
    assert a == b


def test_matcher_never_worse_than_raw_hamming():
    rng = np.random.default_rng(3)
    m = box([0, 0, 0], [0.2, 0.1, 0.3], divisions=2)
    for theta in rng.uniform(0, 2 * np.pi, 4):
        rot = m.with_vertices(m.vertices @ rotation_about([0, 0, 1], theta).T)
        a = extract_feature(build_signed_field(m, resolution=150), m)
        b = extract_feature(build_signed_field(rot, resolution=150), rot)
        assert rotation_distance(a, b)[0] <= hamming(a, b)


def test_rotation_distance_identity_and_shift():
    rng = np.random.default_rng(1)
    a = random_feature(rng)
    assert rotation_distance(a, a) == (0, 0)
    assert rotation_distance(a, rotate_sectors(a, 3))[0] == 0
    assert rotation_distance(rotate_sectors(a, 3), a) == (0, 13)


def test_rotation_distance_vs_naive():
    rng = np.random.default_rng(2)
    for _ in range(3):
        a, b = random_feature(rng), random_feature(rng)
        d, k = rotation_distance(a, b)
        assert d == naive_rotation_distance(a.bits, b.bits, P.shape)
        rolled = np.roll(a.grid(), k, axis=2).ravel()
        assert int(np.sum(rolled != b.bits)) == d


def test_rotation_distance_symmetric_and_zero_iff_rotation():
    rng = np.random.default_rng(4)
    small = FeatureParams(2, 2, 8)
    for _ in range(50):
        a, b = random_feature(rng, small), random_feature(rng, small)
        assert rotation_distance(a, b)[0] == rotation_distance(b, a)[0]
        is_rot = any(rotate_sectors(a, k) == b for k in range(8))
        assert (rotation_distance(a, b)[0] == 0) == is_rot


def test_params_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        rotation_distance(random_feature(rng), random_feature(rng, FeatureParams(8, 8, 8)))


def test_unsigned_field_rejected():
    m = box([0, 0, 0], [0.1, 0.1, 0.1])
    with pytest.raises(DomainError):
        extract_feature(build_distance_field(m, resolution=100), m)


def test_mesh_outside_field_rejected():
    m = box([0, 0, 0], [0.1, 0.1, 0.1])
    other = m.with_vertices(m.vertices + 1.0)
    with pytest.raises(DomainError):
        extract_feature(build_signed_field(m, resolution=100), other)


def test_flat_mesh_has_no_layers():
    flat = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(InvalidMesh):
        cell_centers(flat, P)
