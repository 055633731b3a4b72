"""Weighted-Hamming retrieval and large-margin weight learning.

Each database feature is first aligned to the query by the sector shift that
minimizes plain Hamming distance; the weighted score is then the sum of `w`
over mismatched bits. Weights are learned with a ranking SVM

    min_w  1/2 |w|^2 + C sum_j xi_j
    s.t.   w . (m_kj - m_ij) >= 1 - xi_j   for same-label i, other-label k

where ``m_ij`` is the 0/1 mismatch vector between aligned item `i` and
calibration query `j`. One slack is shared by all constraints of a query.
The program is solved by a cutting-plane loop whose restricted problems are
solved in the dual by accelerated projected gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EmptyDatabase, LabelMismatch
from .features import BinaryFeature, FeatureParams, _rotations

log = logging.getLogger(__name__)


@dataclass
class WeightVector:
    w: np.ndarray
    params: FeatureParams = field(default_factory=FeatureParams)
    objective: float = float("nan")
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.params.size,):
            raise DomainError(f"weight length {self.w.size} != feature size {self.params.size}")
        if not np.all(np.isfinite(self.w)):
            raise DomainError("weights must be finite")

    @classmethod
    def ones(cls, params=FeatureParams()):
        return cls(np.ones(params.size), params)

    def save(self, path):
        p = self.params
        doc = {"params": {"N": p.layers, "R": p.rings, "Phi": p.sectors}, "w": self.w.tolist()}
        if np.isfinite(self.objective):
            doc["objective"] = self.objective
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        p = doc["params"]
        return cls(np.array(doc["w"], float), FeatureParams(p["N"], p["R"], p["Phi"]),
                   doc.get("objective", float("nan")))


def _unpack_rows(words, size):
    b = np.unpackbits(np.ascontiguousarray(words, dtype="<u8").view(np.uint8), axis=-1, bitorder="little")
    return b[..., :size]


def mismatch_vectors(q, features):
    """Per-item 0/1 mismatch bits after optimal rotation alignment.

    Returns ``(M, shifts, distances)`` with ``M`` of shape ``(n, size)``.
    """
    n = len(features)
    words = np.empty((n, len(q.words)), dtype=np.uint64)
    shifts = np.empty(n, dtype=int)
    dist = np.empty(n, dtype=int)
    for i, f in enumerate(features):
        if f.params != q.params:
            raise DomainError("feature parameters differ")
        x = _rotations(f) ^ q.words[None, :]
        d = np.bitwise_count(x).sum(axis=1)
        s = int(np.argmin(d))
        words[i], shifts[i], dist[i] = x[s], s, d[s]
    return _unpack_rows(words, q.params.size), shifts, dist


def _check_db(db):
    if not len(db):
        raise EmptyDatabase("database is empty")


def best_match(q, db, w=None):
    """Nearest database item under weighted Hamming distance.

    Parameters
    ----------
    q : BinaryFeature
    db : sequence of (BinaryFeature, label)
    w : WeightVector or array, optional
        All-ones when omitted.

    Returns
    -------
    (index, label, score); ties go to the lowest index.
    """
    _check_db(db)
    M, _, dist = mismatch_vectors(q, [f for f, _ in db])
    if w is None:
        scores = dist.astype(float)
    else:
        wv = w.w if isinstance(w, WeightVector) else np.asarray(w, float)
        if wv.shape != (q.params.size,):
            raise DomainError("weight length does not match feature size")
        scores = M @ wv
    k = int(np.argmin(scores))
    return k, db[k][1], float(scores[k])


def rank_matches(q, db, w=None):
    """All database indices ordered by weighted score (stable, so ties keep index order)."""
    _check_db(db)
    M, _, dist = mismatch_vectors(q, [f for f, _ in db])
    scores = dist.astype(float) if w is None else M @ (w.w if isinstance(w, WeightVector) else w)
    order = np.argsort(scores, kind="stable")
    return order, scores


def classification_accuracy(predictions, ground_truth):
    predictions, ground_truth = list(predictions), list(ground_truth)
    if len(predictions) != len(ground_truth):
        raise DomainError("prediction and ground-truth lengths differ")
    if not predictions:
        raise DomainError("no predictions")
    return sum(p == g for p, g in zip(predictions, ground_truth)) / len(predictions)


# --------------------------------------------------------------------------
# cutting-plane RankSVM


def _project_capped_simplex(v, cap):
    """Euclidean projection of `v` onto {a >= 0, sum(a) <= cap}."""
    a = np.maximum(v, 0.0)
    if a.sum() <= cap:
        return a
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - cap
    k = np.nonzero(u - css / np.arange(1, len(u) + 1) > 0)[0][-1]
    return np.maximum(v - css[k] / (k + 1), 0.0)


def _solve_dual(K, groups, C, alpha, iters=3000, tol=1e-10):
    """max_a  sum(a) - a^T K a / 2  s.t.  a >= 0, per-group sum <= C.

    FISTA with restarts, warm-started from `alpha`.
    """
    m = len(alpha)
    L = max(np.linalg.eigvalsh(K)[-1], 1e-12) if m > 1 else max(K[0, 0], 1e-12)
    ids = [np.nonzero(groups == g)[0] for g in np.unique(groups)]

    def proj(v):
        out = np.empty_like(v)
        for idx in ids:
            out[idx] = _project_capped_simplex(v[idx], C)
        return out

    def dual(a):
        return a.sum() - 0.5 * a @ K @ a

    a = proj(alpha)
    y, t, prev = a.copy(), 1.0, dual(a)
    for _ in range(iters):
        a_new = proj(y + (1.0 - K @ y) / L)
        val = dual(a_new)
        if val < prev:  # restart momentum
            y, t = a.copy(), 1.0
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = a_new + (t - 1) / t_new * (a_new - a)
        done = abs(val - prev) <= tol * max(1.0, abs(val))
        a, t, prev = a_new, t_new, val
        if done:
            break
    return a


def _primal(w, S, same, C):
    """True primal objective over all constraints plus per-query slacks."""
    scores = S @ w
    xi = np.empty(len(S))
    for j in range(len(S)):
        sj = scores[j]
        xi[j] = max(0.0, 1.0 - (sj[~same[j]].min() - sj[same[j]].max()))
    return 0.5 * w @ w + C * xi.sum(), xi


def learn_weights(db, calib, C=10.0, max_iter=200, tol=1e-4):
    """Learn Hamming weights from calibration queries with known labels.

    Parameters
    ----------
    db : sequence of (BinaryFeature, label)
    calib : sequence of (BinaryFeature, label)
        Every calibration label must occur in `db`, and `db` must hold at
        least one item with a different label.
    C : float
        Slack penalty.

    Returns
    -------
    WeightVector
        ``objective`` is the best primal value reached; ``trace`` holds one
        dict per cutting-plane iteration with the best primal value so far
        (non-increasing), the restricted dual bound (non-decreasing), the
        largest violation and the working-set size.
    """
    _check_db(db)
    if not C > 0:
        raise DomainError("C must be positive")
    if not len(calib):
        raise DomainError("calibration set is empty")
    labels = [lab for _, lab in db]
    params = db[0][0].params
    if set(lab for _, lab in calib) - set(labels):
        raise LabelMismatch("calibration labels missing from the database")
    if len(set(labels)) < 2:
        raise LabelMismatch("database needs at least two labels")

    feats = [f for f, _ in db]
    # S[j, i] = mismatch bits between aligned db item i and calib query j
    S = np.stack([mismatch_vectors(q, feats)[0] for q, _ in calib]).astype(np.float64)
    same = np.array([[d == lab for d in labels] for _, lab in calib], dtype=bool)
    n_q, n_db, dim = S.shape

    w = np.zeros(dim)
    rows, groups, pairs = [], [], set()
    alpha = np.zeros(0)
    K = np.zeros((0, 0))
    best_w, best_obj = w.copy(), _primal(w, S, same, C)[0]
    trace = []
    for it in range(max_iter):
        scores = S @ w
        xi_ws = np.zeros(n_q)
        if rows:
            D = np.array(rows)
            marg = 1.0 - D @ w
            for c, g in enumerate(groups):
                xi_ws[g] = max(xi_ws[g], marg[c])
        added, worst = 0, 0.0
        for j in range(n_q):
            sj = scores[j]
            i_pos = np.nonzero(same[j])[0]
            i_neg = np.nonzero(~same[j])[0]
            i = i_pos[np.argmax(sj[i_pos])]
            k = i_neg[np.argmin(sj[i_neg])]
            viol = 1.0 - (sj[k] - sj[i]) - xi_ws[j]
            worst = max(worst, viol)
            if viol > tol and (j, i, k) not in pairs:
                pairs.add((j, i, k))
                rows.append(S[j, k] - S[j, i])
                groups.append(j)
                added += 1
        if not added:
            trace.append({"iter": it, "primal": best_obj, "dual": _dual_value(alpha, K),
                          "violation": worst, "constraints": len(rows)})
            break
        D = np.array(rows)
        K = D @ D.T
        alpha = _solve_dual(K, np.array(groups), C, np.concatenate([alpha, np.zeros(added)]))
        w = alpha @ D
        obj = _primal(w, S, same, C)[0]
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
        trace.append({"iter": it, "primal": best_obj, "dual": _dual_value(alpha, K),
                      "violation": worst, "constraints": len(rows)})
        log.debug("cutting plane %d: primal %.6g, violation %.3g, |W| %d", it, best_obj, worst, len(rows))
    if not np.linalg.norm(best_w) > 0:
        # all constraints already satisfied by w=0 is impossible (margin 1), but guard anyway
        best_w = np.full(dim, 1e-12)
    return WeightVector(best_w, params, float(best_obj), trace)


def _dual_value(alpha, K):
    return float(alpha.sum() - 0.5 * alpha @ K @ alpha) if len(alpha) else 0.0


# --------------------------------------------------------------------------
# synthetic cross-domain corpus


def domain_shift_corpus(n_labels=10, n_calib=5, n_test=10, params=FeatureParams(),
                        mask_frac=0.25, in_mask=60, out_mask=20, noise=0.01, seed=0):
    """Seeded corpus where a fixed bit mask is flipped on every query.

    Prototypes share a random base and differ pairwise mostly inside the
    mask, so flipping the mask pulls queries toward wrong labels under plain
    Hamming distance while bits outside the mask still separate them.

    Returns ``(db, calib, test, mask)``.
    """
    rng = np.random.default_rng(seed)
    size = params.size
    mask = np.zeros(size, bool)
    mask[rng.choice(size, int(round(mask_frac * size)), replace=False)] = True
    inside, outside = np.nonzero(mask)[0], np.nonzero(~mask)[0]
    base = rng.integers(0, 2, size, dtype=np.uint8)
    protos = []
    for _ in range(n_labels):
        p = base.copy()
        p[rng.choice(inside, in_mask, replace=False)] ^= 1
        p[rng.choice(outside, out_mask, replace=False)] ^= 1
        protos.append(p)

    def query(lab):
        x = protos[lab] ^ mask.astype(np.uint8)
        x = x ^ (rng.random(size) < noise).astype(np.uint8)
        return BinaryFeature.from_bits(x, params), lab

    db = [(BinaryFeature.from_bits(p, params), lab) for lab, p in enumerate(protos)]
    calib = [query(lab) for lab in range(n_labels) for _ in range(n_calib)]
    test = [query(lab) for lab in range(n_labels) for _ in range(n_test)]
    return db, calib, test, mask
