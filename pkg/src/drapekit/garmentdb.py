"""Simulated garment database and synthetic "reconstructed" queries.

Every labeled anchor of every garment is hung under gravity in the cloth
simulator; the draped mesh, its binary feature and its anchor positions are
stored as one entry. On disk::

    db/manifest.json
    db/<garment>/<grasp_label>/drape.obj
    db/<garment>/<grasp_label>/anchors.json
    db/<garment>/<grasp_label>/feat.bin
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import config
from .clothsim import ClothParams, simulate_hang
from .errors import DomainError, EmptyDatabase, InvalidMesh, InvalidNoiseSpec, SimDiverged, ValidationError
from .features import BinaryFeature, FeatureParams, extract_feature, load_feature, save_feature
from .mesh import TriMesh, load_obj, save_obj
from .metric import best_match
from .sdf import GridSpec, build_signed_field

log = logging.getLogger(__name__)

FORMAT = "drapekit-db/1"


@dataclass(frozen=True)
class Garment:
    """A flat garment to be hung: id, category and two-sided rest mesh."""

    garment_id: str
    category: str
    mesh: TriMesh


@dataclass(frozen=True)
class DatabaseSettings:
    """Everything that determines the content of a database.

    grid_nodes : SDF nodes along the longest axis of each draped mesh
    shell : occupancy thickness (m) for feature bits, see
        :func:`drapekit.features.extract_feature`
    max_time : simulated seconds allowed for each hang to settle
    """

    sim: ClothParams = ClothParams(damping=5.0)
    feature: FeatureParams = FeatureParams()
    grid_nodes: int = 128
    shell: float = 0.01
    max_time: float = 30.0

    def to_dict(self):
        return {"sim": asdict(self.sim), "feature": asdict(self.feature), "grid_nodes": self.grid_nodes,
                "shell": self.shell, "max_time": self.max_time}

    @classmethod
    def from_dict(cls, d):
        return cls(ClothParams(**d["sim"]), FeatureParams(**d["feature"]), int(d["grid_nodes"]),
                   float(d["shell"]), float(d["max_time"]))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class GarmentEntry:
    garment_id: str
    category: str
    grasp_label: str
    grasp_vertex: int
    draped_mesh: TriMesh
    feature: BinaryFeature
    anchor_points: dict = field(default_factory=dict)

    @property
    def entry_id(self):
        return f"{self.garment_id}/{self.grasp_label}"

    @property
    def label(self):
        """Retrieval label ``(garment, grasp)``."""
        return (self.garment_id, self.grasp_label)


@dataclass
class DatabaseManifest:
    entries: list
    feature_params: FeatureParams
    provenance: dict
    root: Path | None = None

    def to_json(self):
        return {
            "format": FORMAT,
            "feature_params": {"N": self.feature_params.layers, "R": self.feature_params.rings,
                               "Phi": self.feature_params.sectors},
            "provenance": self.provenance,
            "entries": self.entries,
        }

    def validate(self):
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate entry ids in manifest")
        if self.root is not None:
            for e in self.entries:
                for key in ("drape", "anchors", "feature"):
                    if not (self.root / e[key]).exists():
                        raise ValidationError(f"{e['id']}: missing {e[key]}")


class Database:
    """Loaded entries plus the manifest they came from."""

    def __init__(self, entries, manifest):
        self.entries = list(entries)
        self.manifest = manifest

    def __len__(self):
        return len(self.entries)

    @property
    def features(self):
        return [e.feature for e in self.entries]

    @property
    def settings(self):
        return DatabaseSettings.from_dict(self.manifest.provenance["settings"])

    def match(self, feature, w=None, category=None):
        """Best entry for `feature`, optionally restricted to a category.

        Returns ``(entry, score)``.
        """
        pool = [e for e in self.entries if category is None or e.category == category]
        if not pool:
            raise EmptyDatabase("no entries to match against")
        idx, _, score = best_match(feature, [(e.feature, e.label) for e in pool], w)
        return pool[idx], score

    def ranked(self, feature, w=None):
        from .metric import rank_matches

        order, scores = rank_matches(feature, [(e.feature, e.label) for e in self.entries], w)
        return [(self.entries[i], float(scores[i])) for i in order]


# --------------------------------------------------------------------------
# features of arbitrary meshes


def field_for(mesh, grid_nodes=128):
    """Signed field on a grid with `grid_nodes` nodes along the longest axis.

    Open meshes (cropped reconstructions) get the open-surface sign.
    """
    lo, hi = mesh.bounds()
    ext = float(np.max(hi - lo))
    if not ext > 0:
        raise InvalidMesh("mesh has no extent")
    # fit() pads by 5% plus 3 voxels on each side
    res = (grid_nodes - 1 - 6) / (1.1 * ext)
    spec = GridSpec.fit(mesh, resolution=res)
    return build_signed_field(mesh, spec, allow_open=True)


def mesh_feature(mesh, settings=DatabaseSettings()):
    """Feature of a hanging mesh under the database's settings."""
    f = field_for(mesh, settings.grid_nodes)
    return extract_feature(f, mesh, settings.feature, shell=settings.shell)


# --------------------------------------------------------------------------
# building


def _hang_entry(args):
    garment, label, settings = args
    vid = garment.mesh.anchors[label]
    eid = f"{garment.garment_id}/{label}"
    try:
        draped, info = simulate_hang(garment.mesh, vid, settings.sim, max_time=settings.max_time, return_info=True)
    except SimDiverged as exc:
        raise SimDiverged(f"{eid}: {exc}", entry_id=eid) from exc
    if not info["converged"]:
        raise SimDiverged(f"{eid}: no quasi-static state within {settings.max_time} s", entry_id=eid)
    feat = mesh_feature(draped, settings)
    points = {k: draped.vertices[v].copy() for k, v in sorted(garment.mesh.anchors.items())}
    return GarmentEntry(garment.garment_id, garment.category, label, vid, draped, feat, points)


def build_entries(garments, settings=DatabaseSettings(), jobs=1):
    """Hang every (garment, anchor) pair and return the entries in a fixed
    order (garments as given, anchor labels sorted)."""
    tasks = []
    ids = set()
    for g in garments:
        if g.garment_id in ids:
            raise DomainError(f"duplicate garment id {g.garment_id!r}")
        ids.add(g.garment_id)
        if not g.mesh.anchors:
            raise DomainError(f"garment {g.garment_id!r} has no anchors")
        tasks += [(g, label, settings) for label in sorted(g.mesh.anchors)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_hang_entry, tasks))
    return [_hang_entry(t) for t in tasks]


def _entry_record(e):
    base = f"{e.garment_id}/{e.grasp_label}"
    return {
        "id": e.entry_id,
        "garment_id": e.garment_id,
        "category": e.category,
        "grasp_label": e.grasp_label,
        "grasp_vertex": e.grasp_vertex,
        "drape": f"{base}/drape.obj",
        "anchors": f"{base}/anchors.json",
        "feature": f"{base}/feat.bin",
    }


def save_entry(entry, root):
    rec = _entry_record(entry)
    d = Path(root) / entry.garment_id / entry.grasp_label
    d.mkdir(parents=True, exist_ok=True)
    save_obj(entry.draped_mesh, Path(root) / rec["drape"], sidecar=False)
    anchors = {
        "grasp": entry.grasp_label,
        "anchors": {k: {"vertex": int(entry.draped_mesh.anchors[k]), "point": [float(c) for c in p]}
                    for k, p in entry.anchor_points.items()},
    }
    (Path(root) / rec["anchors"]).write_text(json.dumps(anchors, indent=1) + "\n")
    save_feature(entry.feature, Path(root) / rec["feature"])
    return rec


def build_database(garments, out_dir=None, settings=DatabaseSettings(), jobs=1):
    """Simulate, featurize and (optionally) persist a garment database.

    Parameters
    ----------
    garments : list of Garment
        Flat two-sided meshes with anchors.
    out_dir : path, optional
        When given, entries and ``manifest.json`` are written there.

    Returns
    -------
    Database
    """
    entries = build_entries(garments, settings, jobs)
    prov = {"settings": settings.to_dict(), "settings_hash": settings.digest(),
            "garments": {g.garment_id: _mesh_digest(g.mesh) for g in garments}}
    records = [_entry_record(e) for e in entries]
    manifest = DatabaseManifest(records, settings.feature, prov, Path(out_dir) if out_dir else None)
    if out_dir is not None:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        for e in entries:
            save_entry(e, root)
        (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n")
    manifest.validate()
    return Database(entries, manifest)


def _mesh_digest(mesh):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, "<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.triangles, "<i8").tobytes())
    h.update(json.dumps(mesh.anchors, sort_keys=True).encode())
    return h.hexdigest()


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{path} not found")
    data = json.loads(path.read_text())
    if data.get("format") != FORMAT:
        raise ValidationError(f"{path}: unknown format {data.get('format')!r}")
    config.validate(data, "manifest", str(path))
    fp = data["feature_params"]
    m = DatabaseManifest(data["entries"], FeatureParams(fp["N"], fp["R"], fp["Phi"]), data["provenance"], root)
    m.validate()
    return m


def load_database(root):
    """Read a database written by :func:`build_database`."""
    m = read_manifest(root)
    entries = []
    for rec in m.entries:
        anchors = json.loads((m.root / rec["anchors"]).read_text())["anchors"]
        ids = {k: v["vertex"] for k, v in anchors.items()}
        mesh = load_obj(m.root / rec["drape"], anchors=ids)
        feat = load_feature(m.root / rec["feature"])
        if feat.params != m.feature_params:
            raise ValidationError(f"{rec['id']}: feature params differ from the manifest")
        points = {k: np.asarray(v["point"], float) for k, v in anchors.items()}
        entries.append(GarmentEntry(rec["garment_id"], rec["category"], rec["grasp_label"],
                                    int(rec["grasp_vertex"]), mesh, feat, points))
    return Database(entries, m)


def load_garments(directory):
    """Garments from ``<id>.obj`` files (anchors from the sidecar JSON,
    category from an optional ``<id>.category`` text file, else the id)."""
    out = []
    for p in sorted(Path(directory).glob("*.obj")):
        cat = p.with_suffix(".category")
        category = cat.read_text().strip() if cat.exists() else p.stem
        out.append(Garment(p.stem, category, load_obj(p)))
    if not out:
        raise ValidationError(f"no .obj garments in {directory}")
    return out


# --------------------------------------------------------------------------
# perturbed queries


@dataclass(frozen=True)
class NoiseSpec:
    """jitter : per-axis Gaussian sigma (m); smoothing : Laplacian passes;
    crop : fraction of vertices removed from the top."""

    jitter: float = 0.0
    smoothing: int = 0
    crop: float = 0.0

    def __post_init__(self):
        if self.jitter < 0 or self.smoothing < 0:
            raise InvalidNoiseSpec("jitter and smoothing must be non-negative")
        if not 0 <= self.crop <= 0.5:
            raise InvalidNoiseSpec("crop may remove at most 50% of the vertices")


def _umbrella(mesh):
    n = mesh.n_vertices
    e = mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    A = ((A + A.T) > 0).astype(float)
    deg = np.asarray(A.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    return sp.diags(1.0 / deg) @ A


def laplacian_smooth(vertices, mesh, passes, lam=0.5):
    x = np.array(vertices, float)
    if passes:
        W = _umbrella(mesh)
        for _ in range(passes):
            x = x + lam * (W @ x - x)
    return x


def crop_top(mesh, fraction):
    """Remove the highest ``round(fraction * n)`` vertices (and their
    triangles); surviving vertices are renumbered in order."""
    n = mesh.n_vertices
    k = int(round(fraction * n))
    if k == 0:
        return mesh
    order = np.lexsort((np.arange(n), -mesh.vertices[:, 2]))
    keep = np.ones(n, bool)
    keep[order[:k]] = False
    new = np.full(n, -1)
    new[keep] = np.arange(keep.sum())
    tri = mesh.triangles[np.all(keep[mesh.triangles], axis=1)]
    anchors = {a: int(new[v]) for a, v in mesh.anchors.items() if keep[v]}
    uv = None if mesh.uv is None else mesh.uv[keep]
    return TriMesh(mesh.vertices[keep], new[tri], anchors, uv, check=False)


def perturb_query(entry, noise=NoiseSpec(), seed=0):
    """Reconstruction-like copy of an entry's draped mesh.

    Seeded Gaussian jitter, then Laplacian smoothing, then a crop of the
    top region. A zero spec returns the mesh unchanged.
    """
    if isinstance(noise, dict):
        noise = NoiseSpec(**noise)
    mesh = entry.draped_mesh if isinstance(entry, GarmentEntry) else entry
    if noise == NoiseSpec():
        return mesh
    rng = np.random.default_rng(seed)
    x = mesh.vertices + rng.normal(0.0, noise.jitter, mesh.vertices.shape) if noise.jitter > 0 else mesh.vertices
    x = laplacian_smooth(x, mesh, noise.smoothing)
    out = mesh.with_vertices(x)
    return crop_top(out, noise.crop)
