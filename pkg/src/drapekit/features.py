"""Cylindrical binary shape feature and rotation-invariant Hamming matching.

A hanging garment is cut into `N` horizontal layers (top-down); each layer is
divided into `R` uniform rings and `Phi` sectors around a polar origin. A
cell's bit is set when the signed distance at the cell center is <= 0.

Bits are stored layer-major, then ring, then sector (sector fastest), packed
little-endian into 64-bit words.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidMesh
from .sdf import sample_signed

VERTICAL = 2


@dataclass(frozen=True)
class FeatureParams:
    layers: int = 16
    rings: int = 16
    sectors: int = 16

    def __post_init__(self):
        if min(self.layers, self.rings, self.sectors) < 1:
            raise ValueError("feature dimensions must be positive")
        if self.size > 2**20:
            raise ValueError("feature larger than 2**20 bits")

    @property
    def size(self):
        return self.layers * self.rings * self.sectors

    @property
    def shape(self):
        return (self.layers, self.rings, self.sectors)


def _pack(bits):
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    pad = (-len(bits)) % 64
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, np.uint8)])
    return np.packbits(bits, bitorder="little").view("<u8").copy()


def _unpack(words, size):
    b = np.unpackbits(np.asarray(words, dtype="<u8").view(np.uint8), bitorder="little")
    return b[:size]


@dataclass(frozen=True, eq=False)
class BinaryFeature:
    params: FeatureParams
    words: np.ndarray

    @classmethod
    def from_bits(cls, bits, params):
        bits = np.asarray(bits)
        if bits.size != params.size:
            raise DomainError(f"expected {params.size} bits, got {bits.size}")
        return cls(params, _pack(bits))

    @property
    def bits(self):
        return _unpack(self.words, self.params.size)

    def grid(self):
        return self.bits.reshape(self.params.shape)

    def count(self):
        return int(np.bitwise_count(self.words).sum())

    def __eq__(self, other):
        return (
            isinstance(other, BinaryFeature)
            and self.params == other.params
            and np.array_equal(self.words, other.words)
        )

    def __hash__(self):
        return hash((self.params, self.words.tobytes()))


def rotate_sectors(feature, shift):
    """Cyclically shift the sector index by `shift` inside every (layer, ring) group."""
    g = feature.grid()
    return BinaryFeature(feature.params, _pack(np.roll(g, shift, axis=2)))


def _rotations(feature):
    g = feature.grid()
    return np.stack([_pack(np.roll(g, s, axis=2)) for s in range(feature.params.sectors)])


def rotation_distance(a, b):
    """``min_i popcount(rotate(a, i) XOR b)`` and the smallest minimizing shift."""
    if a.params != b.params:
        raise DomainError("feature parameters differ")
    d = np.bitwise_count(_rotations(a) ^ b.words[None, :]).sum(axis=1)
    shift = int(np.argmin(d))
    return int(d[shift]), shift


def hamming(a, b):
    if a.params != b.params:
        raise DomainError("feature parameters differ")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def cell_centers(mesh, params, origin=None):
    """World-space cell centers, shape ``(N, R, Phi, 3)``, plus the frame used.

    Layers split the vertical extent of `mesh` top-down. The polar origin
    defaults to the mean planar position of the vertices in the top layer.
    Ring radii are uniform on ``[0, r_max]`` where `r_max` is the largest
    planar vertex radius. Sector 0 starts at world +x.
    """
    v = mesh.vertices
    if len(v) == 0:
        raise InvalidMesh("mesh has no vertices")
    planar = [a for a in range(3) if a != VERTICAL]
    z = v[:, VERTICAL]
    top, bottom = z.max(), z.min()
    height = top - bottom
    if not height > 0:
        raise InvalidMesh("mesh has no vertical extent")
    dz = height / params.layers
    if origin is None:
        layer = np.minimum(((top - z) / dz).astype(int), params.layers - 1)
        first = v[layer == 0]
        if not len(first):
            raise InvalidMesh("top layer is empty")
        origin = first[:, planar].mean(axis=0)
    origin = np.asarray(origin, dtype=float)
    r_max = float(np.linalg.norm(v[:, planar] - origin, axis=1).max())
    if not r_max > 0:
        raise InvalidMesh("mesh has no planar extent around the polar origin")
    zc = top - (np.arange(params.layers) + 0.5) * dz
    rc = (np.arange(params.rings) + 0.5) * r_max / params.rings
    pc = (np.arange(params.sectors) + 0.5) * 2 * np.pi / params.sectors
    Z, Rr, P = np.meshgrid(zc, rc, pc, indexing="ij")
    pts = np.empty(Z.shape + (3,))
    pts[..., planar[0]] = origin[0] + Rr * np.cos(P)
    pts[..., planar[1]] = origin[1] + Rr * np.sin(P)
    pts[..., VERTICAL] = Z
    return pts, {"origin": origin, "r_max": r_max, "top": top, "layer_height": dz}


def extract_feature(field, mesh, params=FeatureParams(), origin=None, shell=0.0):
    """Binary occupancy feature of a hanging `mesh` from its signed field.

    A cell bit is 1 when the nearest-node signed distance at its center is
    ``<= shell``. ``shell = 0`` is the plain inside test; a positive value
    thickens thin cloth into a slab so that sparse cell centers can hit it.
    Cell centers off the grid read as outside.
    """
    if not field.is_signed:
        raise DomainError("feature extraction needs a signed field")
    if not np.all(field.spec.contains(mesh.vertices)):
        raise DomainError("mesh lies outside the distance field grid")
    pts, _ = cell_centers(mesh, params, origin)
    sd = sample_signed(field, pts.reshape(-1, 3))
    return BinaryFeature.from_bits(sd <= shell, params)


# --------------------------------------------------------------------------
# file format: N, R, Phi as little-endian u32, then packed u64 words


def save_feature(feature, path):
    p = feature.params
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", p.layers, p.rings, p.sectors))
        fh.write(feature.words.astype("<u8").tobytes())


def load_feature(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    n, r, s = struct.unpack_from("<3I", raw)
    params = FeatureParams(n, r, s)
    words = np.frombuffer(raw, "<u8", offset=12).copy()
    if len(words) != -(-params.size // 64):
        raise DomainError(f"{path}: word count does not match header")
    return BinaryFeature(params, words)
