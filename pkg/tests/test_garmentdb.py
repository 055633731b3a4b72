import json
from dataclasses import replace

import numpy as np
import pytest

from drapekit import config
from drapekit.errors import DomainError, InvalidNoiseSpec, ValidationError
from drapekit.garmentdb import (DatabaseSettings, Garment, NoiseSpec, build_database, field_for, load_database,
                                mesh_feature, perturb_query, read_manifest)
from drapekit.metric import best_match
from drapekit.sdf import query_closest


def by_garment(db):
    out = {}
    for e in db.entries:
        out.setdefault(e.garment_id, []).append(e)
    return out


def test_entry_cardinality(corpus, garments):
    groups = by_garment(corpus)
    assert {g: len(v) for g, v in groups.items()} == {"towel": 4, "shirt": 19, "pants": 12}
    for g in garments:
        assert sorted(e.grasp_label for e in groups[g.garment_id]) == sorted(g.mesh.anchors)


def test_layout_and_manifest(corpus_dir, corpus):
    doc = json.loads((corpus_dir / "manifest.json").read_text())
    config.validate(doc, "manifest")
    for e in corpus.entries:
        d = corpus_dir / e.garment_id / e.grasp_label
        assert {p.name for p in d.iterdir()} == {"drape.obj", "anchors.json", "feat.bin"}
    ids = [r["id"] for r in doc["entries"]]
    assert len(ids) == len(set(ids))
    assert doc["provenance"]["settings_hash"] == DatabaseSettings().digest()


def test_feature_params_consistent(corpus):
    assert {e.feature.params for e in corpus.entries} == {corpus.manifest.feature_params}


def test_anchor_points_on_draped_surface(corpus):
    for e in corpus.entries[::5]:
        f = field_for(e.draped_mesh)
        pts = np.array(list(e.anchor_points.values()))
        _, d = query_closest(f, pts)
        assert d.max() < 1e-3


def test_grasp_vertex_is_topmost(corpus):
    for e in corpus.entries:
        z = e.draped_mesh.vertices[:, 2]
        assert z[e.grasp_vertex] == pytest.approx(z.max(), abs=1e-3)


def test_self_retrieval(corpus):
    db = [(e.feature, e.label) for e in corpus.entries]
    for i, e in enumerate(corpus.entries):
        assert best_match(e.feature, db) == (i, e.label, 0.0)


def test_near_self_retrieval(corpus):
    hits = 0
    for i, e in enumerate(corpus.entries):
        q = perturb_query(e, NoiseSpec(jitter=0.005), seed=i)
        hits += corpus.match(mesh_feature(q, corpus.settings))[0].label == e.label
    assert hits / len(corpus) >= 0.9


def test_rebuild_is_bit_identical(garments, towel_db):
    towel = [g for g in garments if g.garment_id == "towel"]
    again = build_database(towel)
    for a, b in zip(again.entries, towel_db.entries):
        assert a.entry_id == b.entry_id
        assert a.feature == b.feature


def test_roundtrip_matches_memory(garments, tmp_path):
    towel = [g for g in garments if g.garment_id == "towel"]
    mem = build_database(towel, tmp_path / "db")
    disk = load_database(tmp_path / "db")
    for a, b in zip(mem.entries, disk.entries):
        assert a.feature == b.feature
        np.testing.assert_array_equal(a.draped_mesh.vertices, b.draped_mesh.vertices)
        assert a.draped_mesh.anchors == b.draped_mesh.anchors


def test_manifest_rejects_unknown_keys(corpus_dir, tmp_path):
    doc = json.loads((corpus_dir / "manifest.json").read_text())
    doc["extra"] = 1
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        read_manifest(tmp_path)


def test_garment_without_anchors(garments):
    g = garments[0]
    bare = Garment("bare", "towel", replace(g.mesh, anchors={}))
    with pytest.raises(DomainError):
        build_database([bare])


# --------------------------------------------------------------------------
# perturbed queries


@pytest.fixture(scope="module")
def entry(towel_db):
    return towel_db.entries[0]


def test_zero_noise_is_identity(entry):
    q = perturb_query(entry, NoiseSpec())
    np.testing.assert_array_equal(q.vertices, entry.draped_mesh.vertices)


def test_jitter_displacement_statistics(entry):
    q = perturb_query(entry, NoiseSpec(jitter=0.002), seed=3)
    d = np.linalg.norm(q.vertices - entry.draped_mesh.vertices, axis=1).mean()
    assert 1e-3 <= d <= 4e-3


def test_crop_fraction(entry):
    n = entry.draped_mesh.n_vertices
    q = perturb_query(entry, NoiseSpec(crop=0.1))
    assert abs((n - q.n_vertices) / n - 0.1) <= 0.02
    assert q.vertices[:, 2].max() < entry.draped_mesh.vertices[:, 2].max()


def test_perturbation_seeded(entry):
    a = perturb_query(entry, NoiseSpec(jitter=0.002, smoothing=1), seed=5)
    b = perturb_query(entry, NoiseSpec(jitter=0.002, smoothing=1), seed=5)
    np.testing.assert_array_equal(a.vertices, b.vertices)


def test_invalid_noise():
    with pytest.raises(InvalidNoiseSpec):
        NoiseSpec(crop=0.6)
    with pytest.raises(InvalidNoiseSpec):
        NoiseSpec(jitter=-1.0)
