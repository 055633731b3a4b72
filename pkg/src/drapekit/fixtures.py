"""Desk-scale garment outlines with labeled anchor points.

Contours are in meters in the garment's flat (x, y) plane. Shirt and pants
are symmetric about ``x = 0``; labels ending in ``_l`` sit on the ``x < 0``
side as seen on the flat garment.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .mesh import Contour2D, load_obj, mesh_from_contour

#: default target edge length for fixture meshes (m)
EDGE = 0.04


@dataclass(frozen=True)
class GarmentSpec:
    name: str
    category: str
    contour: np.ndarray
    anchors: dict


def _mirror(half):
    """Close a right-half outline (listed from the bottom axis point upward)
    by mirroring it across x = 0."""
    half = np.asarray(half, float)
    left = half[::-1].copy()
    left[:, 0] *= -1
    pts = np.vstack([half, left])
    # drop duplicated axis points
    keep = np.ones(len(pts), bool)
    for i in range(len(pts)):
        if np.allclose(pts[i], pts[i - 1]):
            keep[i] = False
    return pts[keep]


def _mid(a, b, t=0.5):
    return tuple(np.asarray(a) + t * (np.asarray(b) - np.asarray(a)))


def towel():
    w, h = 0.40, 0.20
    c = np.array([(0, 0), (w, 0), (w, h), (0, h)], float)
    anchors = {"corner_a": c[0], "corner_b": c[1], "corner_c": c[2], "corner_d": c[3]}
    return GarmentSpec("towel", "towel", c, {k: tuple(v) for k, v in anchors.items()})


def shirt():
    hem = (0.15, 0.0)
    pit = (0.15, 0.308)
    cuff_in = (0.437, 0.142)
    cuff_out = (0.482, 0.22)
    shoulder = (0.17, 0.40)
    neck = (0.07, 0.44)
    half = [(0.0, 0.0), hem, pit, cuff_in, cuff_out, shoulder, neck, (0.035, 0.41), (0.0, 0.40)]
    right = {
        "hem": hem,
        "side": _mid(hem, pit),
        "armpit": pit,
        "elbow_inner": _mid(pit, cuff_in),
        "cuff_inner": cuff_in,
        "cuff_outer": cuff_out,
        "elbow": _mid(cuff_out, shoulder),
        "shoulder": shoulder,
        "neck": neck,
    }
    anchors = {"hem_center": (0.0, 0.0)}
    for k, (x, y) in right.items():
        anchors[k + "_r"] = (x, y)
        anchors[k + "_l"] = (-x, y)
    return GarmentSpec("shirt", "shirt", _mirror(half), anchors)


def pants():
    hem_out, hem_in = (0.20, 0.0), (0.03, 0.0)
    crotch, waist = (0.0, 0.30), (0.18, 0.50)
    c = np.array([(-0.20, 0.0), (-0.03, 0.0), crotch, hem_in, hem_out, waist, (-0.18, 0.50)], float)
    right = {
        "hem_outer": hem_out,
        "hem_inner": hem_in,
        "knee_outer": _mid(hem_out, waist, 0.45),
        "knee_inner": _mid(hem_in, crotch, 0.6),
        "waist": waist,
    }
    anchors = {"crotch": crotch, "waist_center": (0.0, 0.50)}
    for k, (x, y) in right.items():
        anchors[k + "_r"] = (x, y)
        anchors[k + "_l"] = (-x, y)
    return GarmentSpec("pants", "pants", c, anchors)


GARMENTS = {"towel": towel, "shirt": shirt, "pants": pants}


def garment_mesh(spec, edge=EDGE, seed=0):
    """Two-sided mesh of a :class:`GarmentSpec`."""
    return mesh_from_contour(Contour2D(spec.contour), edge, anchors=spec.anchors, seed=seed)


def data_dir():
    return Path(str(resources.files("drapekit") / "data" / "garments"))


def load_garment(name):
    """Shipped fixture mesh by name (``towel``, ``shirt``, ``pants``)."""
    path = data_dir() / f"{name}.obj"
    return load_obj(path)


def write_fixtures(out_dir, edge=EDGE, seed=0):
    """Regenerate the shipped OBJ fixtures into `out_dir`."""
    from .mesh import save_obj

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, make in GARMENTS.items():
        spec = make()
        p = out / f"{name}.obj"
        save_obj(garment_mesh(spec, edge, seed), p)
        (out / f"{name}.category").write_text(spec.category + "\n")
        paths.append(p)
    return paths
