"""Slow reference implementations used as test oracles."""

import numpy as np


def closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p (region tests, scalar code)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def brute_distance(mesh, p):
    """Exhaustive point-to-mesh distance."""
    best = np.inf
    for t in mesh.triangles:
        a, b, c = mesh.vertices[t]
        best = min(best, float(np.linalg.norm(p - closest_on_triangle(p, a, b, c))))
    return best


def ray_parity_inside(mesh, p, direction=(0.5773, 0.5774, 0.5775)):
    """Inside test by counting ray crossings (Moller-Trumbore)."""
    d = np.asarray(direction, float)
    d /= np.linalg.norm(d)
    tri = mesh.vertices[mesh.triangles]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > 1e-14
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = p - tri[:, 0]
    u = f * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = f * (q @ d)
    t = f * np.einsum("ij,ij->i", e2, q)
    hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    return bool(hit.sum() % 2)


def naive_rotation_distance(a_bits, b_bits, shape):
    """Minimum Hamming distance over sector rotations, cell by cell."""
    N, R, P = shape
    A = np.asarray(a_bits).reshape(N, R, P)
    B = np.asarray(b_bits).reshape(N, R, P)
    best = None
    for k in range(P):
        d = 0
        for i in range(N):
            for j in range(R):
                for s in range(P):
                    d += int(A[i, j, (s + k) % P] != B[i, j, s])
        best = d if best is None else min(best, d)
    return best


def polyline_length(curve, n=10**6):
    u = np.linspace(0.0, 1.0, n + 1)
    P = np.asarray(curve.points)
    b = np.stack([(1 - u) ** 3, 3 * u * (1 - u) ** 2, 3 * u**2 * (1 - u), u**3], axis=1)
    x = b @ P
    return float(np.linalg.norm(np.diff(x, axis=0), axis=1).sum())


def central_gradient(f, x, h=1e-6):
    x = np.array(x, float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g
