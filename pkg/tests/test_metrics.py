import itertools

import numpy as np
import pytest

from safer_lab.metrics import (
    accuracy,
    dbi,
    forgetting_reversal,
    knowledge_erosion,
    margin_histogram,
    representation_similarity,
    threshold_attack,
    tug_of_war,
)
from safer_lab.model import init_model


def constant_model(n_in=3, K=4, cls=0):
    m = init_model((n_in, 2), K, 2, seed=0)
    m.params["head.W"][:] = 0
    m.params["head.b"][:] = 0
    m.params["head.b"][cls] = 1.0
    return m


def test_accuracy_constant_predictor():
    y = np.repeat(np.arange(4), 5)
    assert accuracy(constant_model(), np.zeros((20, 3)), y) == 0.25


def test_accuracy_perfect_and_one_mislabeled():
    m = constant_model(cls=2)
    y = np.full(10, 2)
    assert accuracy(m, np.zeros((10, 3)), y) == 1.0
    y[3] = 1
    assert accuracy(m, np.zeros((10, 3)), y) == 0.9


def test_accuracy_empty_is_undefined():
    assert accuracy(constant_model(), np.zeros((0, 3)), np.zeros(0, dtype=int)) is None


def test_knowledge_erosion():
    assert knowledge_erosion([50, 50, 50]) == 0
    assert knowledge_erosion([90, 80, 70]) == 10
    assert knowledge_erosion([76.60, 76.71, 77.20]) == pytest.approx(-0.30, abs=1e-9)
    assert knowledge_erosion([80]) is None


def test_forgetting_reversal():
    assert forgetting_reversal([0, 0, 0], [0, 0]) == 0
    assert forgetting_reversal([10], [10]) == 0
    assert forgetting_reversal([16.33, 17.11], [68.78, 65.39]) == pytest.approx(50.365, abs=1e-9)
    assert forgetting_reversal([10], []) is None


def test_tug_of_war():
    a = {"retain": 0.9, "forget": 0.1}
    assert tug_of_war(a, dict(a)) == 1.0
    assert tug_of_war({"a": 0.5, "b": 0.5}, {"a": 0.6, "b": 0.3}) == pytest.approx(0.72, abs=1e-15)
    with pytest.raises(ValueError):
        tug_of_war({"a": 1.0}, {"b": 1.0})


def test_tow_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = dict(zip("abc", rng.uniform(size=3)))
        r = dict(zip("abc", rng.uniform(size=3)))
        assert 0 <= tug_of_war(u, r) <= 1


def test_dbi_zero_variance_clusters():
    x = np.array([[0.0, 0.0]] * 3 + [[5.0, 0.0]] * 3)
    assert dbi(x, [0, 0, 0, 1, 1, 1]).value == 0.0


def test_dbi_two_class_formula():
    # each class: points at +-1 around its centroid -> mean squared distance 1
    x = np.array([[-1.0, 0], [1.0, 0], [3.0, 0], [5.0, 0]])
    r = dbi(x, [0, 0, 1, 1])
    assert r.value == pytest.approx(0.5, abs=1e-15)
    assert r.per_class == {0: pytest.approx(0.5), 1: pytest.approx(0.5)}


def brute_force_dbi(x, y):
    classes = sorted(set(y.tolist()))
    cent, spread = {}, {}
    for c in classes:
        pts = x[y == c]
        cent[c] = [sum(col) / len(pts) for col in zip(*pts)]
        spread[c] = sum(sum((p - q) ** 2 for p, q in zip(pt, cent[c])) for pt in pts) / len(pts)
    worst = {c: 0.0 for c in classes}
    for i, j in itertools.permutations(classes, 2):
        dist = sum((a - b) ** 2 for a, b in zip(cent[i], cent[j])) ** 0.5
        worst[i] = max(worst[i], (spread[i] + spread[j]) / dist)
    return sum(worst.values()) / len(classes)


def test_dbi_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(20):
        y = rng.integers(0, 4, size=60)
        y[:4] = np.arange(4)
        x = rng.normal(size=(60, 3)) + 3 * rng.normal(size=(4, 3))[y]
        assert dbi(x, y).value == pytest.approx(brute_force_dbi(x, y), abs=1e-9)


def test_dbi_coincident_centroids_flagged():
    x = np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]])
    r = dbi(x, [0, 0, 1, 1])
    assert r.guarded and np.isfinite(r.value)


def test_margin_histogram_negative_mass_and_totals():
    m = constant_model(cls=3)
    x = np.zeros((7, 3))
    h = margin_histogram(m, x, np.zeros(7, dtype=int), np.linspace(-5, 5, 11))
    assert h.counts.sum() == 7
    assert h.counts[5:].sum() == 0
    assert h.frac_negative == 1.0


def test_margin_histogram_empty():
    h = margin_histogram(constant_model(), np.zeros((0, 3)), np.zeros(0, dtype=int), np.linspace(-1, 1, 5))
    assert h.counts.sum() == 0 and h.frac_negative is None


def test_attack_perfect_separation():
    assert threshold_attack(np.zeros(10), np.full(10, 10.0), np.full(5, 10.0)).score == 100.0


def test_attack_forget_like_members():
    m = np.linspace(0, 1, 10)
    assert threshold_attack(m, np.full(10, 10.0), m.copy()).score == 0.0


def test_attack_degenerate():
    r = threshold_attack(np.ones(4), np.ones(4), np.ones(2))
    assert r.degenerate and r.score == 50.0


def test_attack_threshold_is_balanced_accuracy_optimum():
    rng = np.random.default_rng(5)
    m, n = rng.exponential(0.5, 40), rng.exponential(2.0, 30)
    r = threshold_attack(m, n, n)
    best = max(0.5 * (np.mean(m <= t) + np.mean(n > t)) for t in np.concatenate([[-np.inf], m, n]))
    assert r.balanced_accuracy == pytest.approx(best, abs=1e-15)


def test_similarity_identity_and_negation():
    m = init_model((3, 4), 2, 2, seed=1)
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_allclose(representation_similarity(m, m, x).values, 1.0, atol=1e-12)
    neg = m.copy()
    neg.params["extractor.0.W"] *= -1  # tanh is odd, so features flip sign
    s = representation_similarity(m, neg, x)
    np.testing.assert_allclose(s.values, -1.0, atol=1e-12)
    assert np.all(np.abs(s.values) <= 1)


def test_similarity_excludes_zero_rows():
    m = init_model((3, 4), 2, 2, seed=1)
    x = np.zeros((3, 3))
    assert representation_similarity(m, m, x).excluded == 3
