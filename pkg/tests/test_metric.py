import json

import numpy as np
import pytest

from drapekit.errors import DomainError, EmptyDatabase, LabelMismatch
from drapekit.features import BinaryFeature, FeatureParams, rotate_sectors, rotation_distance
from drapekit.metric import (WeightVector, best_match, classification_accuracy, domain_shift_corpus, learn_weights,
                             rank_matches)

P = FeatureParams()


def rand_db(rng, n=6, params=P):
    return [(BinaryFeature.from_bits(rng.integers(0, 2, params.size), params), f"l{i}") for i in range(n)]


def nn_accuracy(db, queries, w=None):
    pred = [best_match(q, db, w)[1] for q, _ in queries]
    return classification_accuracy(pred, [lab for _, lab in queries])


def test_all_ones_is_rotation_distance_argmin():
    rng = np.random.default_rng(0)
    db = rand_db(rng)
    q = BinaryFeature.from_bits(rng.integers(0, 2, P.size), P)
    k, lab, s = best_match(q, db, WeightVector.ones())
    d = [rotation_distance(f, q)[0] for f, _ in db]
    assert k == int(np.argmin(d)) and s == min(d) and lab == db[k][1]
    assert best_match(q, db) == (k, lab, s)


def test_identical_query_scores_zero():
    rng = np.random.default_rng(1)
    db = rand_db(rng)
    assert best_match(rotate_sectors(db[4][0], 5), db) == (4, "l4", 0.0)


def test_hand_example_zeroed_region():
    # 8 bits, no rotation freedom; bits 0-3 are corrupted in the query
    p = FeatureParams(8, 1, 1)
    f = lambda bits: BinaryFeature.from_bits(np.array(bits), p)  # noqa: E731
    q = f([1, 1, 1, 1, 0, 0, 0, 1])
    db = [(f([1, 1, 1, 1, 1, 1, 1, 0]), "A"), (f([0, 0, 0, 0, 0, 0, 0, 1]), "B"), (f([1, 1, 1, 0, 0, 0, 1, 1]), "C")]
    # plain Hamming: A=4, B=4, C=2; masked: A=4, B=0, C=1
    assert best_match(q, db) == (2, "C", 2.0)
    w = np.array([0, 0, 0, 0, 1, 1, 1, 1], float)
    assert best_match(q, db, w) == (1, "B", 0.0)


def test_tie_goes_to_lowest_index():
    p = FeatureParams(4, 1, 1)
    a = BinaryFeature.from_bits(np.array([1, 0, 0, 0]), p)
    b = BinaryFeature.from_bits(np.array([0, 1, 0, 0]), p)
    q = BinaryFeature.from_bits(np.array([0, 0, 0, 0]), p)
    assert best_match(q, [(a, "a"), (b, "b")])[0] == 0


def test_positive_scale_invariance():
    rng = np.random.default_rng(2)
    db = rand_db(rng)
    w = rng.random(P.size)
    for _ in range(5):
        q = BinaryFeature.from_bits(rng.integers(0, 2, P.size), P)
        assert best_match(q, db, w)[0] == best_match(q, db, 7.5 * w)[0]


def test_rank_matches_orders_scores():
    rng = np.random.default_rng(3)
    db = rand_db(rng)
    q = db[2][0]
    order, scores = rank_matches(q, db)
    assert order[0] == 2 and np.all(np.diff(scores[order]) >= 0)


def test_empty_database():
    with pytest.raises(EmptyDatabase):
        best_match(BinaryFeature.from_bits(np.zeros(P.size), P), [])


def test_accuracy_arithmetic():
    assert classification_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert classification_accuracy([1, 2, 3], [0, 0, 0]) == 0.0
    assert classification_accuracy([0] * 14 + [1] * 5, [0] * 19) == pytest.approx(14 / 19)
    with pytest.raises(DomainError):
        classification_accuracy([1], [1, 2])


def test_exact_copies_give_full_accuracy():
    rng = np.random.default_rng(4)
    db = rand_db(rng, 5)
    w = learn_weights(db, list(db), C=10)
    assert nn_accuracy(db, db, w) == 1.0
    assert np.linalg.norm(w.w) > 0


@pytest.fixture(scope="module")
def shifted():
    db, calib, test, mask = domain_shift_corpus(n_labels=6, n_calib=3, n_test=5, seed=1)
    return db, calib, test, mask, learn_weights(db, calib, C=10)


def test_masked_bits_downweighted(shifted):
    _, _, _, mask, w = shifted
    assert w.w[mask].mean() < w.w[~mask].mean()


def test_objective_monotone(shifted):
    w = shifted[4]
    primal = [t["primal"] for t in w.trace]
    dual = [t["dual"] for t in w.trace]
    assert all(b <= a for a, b in zip(primal, primal[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(dual, dual[1:]))
    assert w.objective == primal[-1]


def test_learned_beats_uniform_on_shift(shifted):
    db, _, test, _, w = shifted
    assert nn_accuracy(db, test, w) > nn_accuracy(db, test)


def test_label_mismatch():
    rng = np.random.default_rng(5)
    db = rand_db(rng, 3)
    with pytest.raises(LabelMismatch):
        learn_weights(db, [(db[0][0], "unknown")])


def test_tiny_penalty_runs():
    rng = np.random.default_rng(6)
    db = rand_db(rng, 3)
    w = learn_weights(db, list(db), C=1e-9)
    assert np.all(np.isfinite(w.w))


def test_nonpositive_penalty():
    rng = np.random.default_rng(6)
    db = rand_db(rng, 3)
    with pytest.raises(DomainError):
        learn_weights(db, list(db), C=0.0)


def test_weights_file_format(tmp_path):
    w = WeightVector(np.linspace(0, 1, P.size))
    p = tmp_path / "w.json"
    w.save(p)
    doc = json.loads(p.read_text())
    assert doc["params"] == {"N": 16, "R": 16, "Phi": 16}
    assert len(doc["w"]) == P.size
    back = WeightVector.load(p)
    np.testing.assert_array_equal(back.w, w.w)
