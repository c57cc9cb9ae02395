import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from shadowtrace.errors import DegenerateDifferences, DegenerateVariance, DimensionMismatch
from shadowtrace.metrics import (MSE_SCALE, confusion_scores, human_variability, icc, icc_mean_squares,
                                 paired_t_test, soft_dice)


def anova_icc(a, b):
    """Textbook two-way ANOVA with explicit loops, ICC(2,1)."""
    data = [list(r) for r in zip(np.ravel(a).tolist(), np.ravel(b).tolist())]
    n, k = len(data), 2
    grand = sum(sum(r) for r in data) / (n * k)
    ssr = k * sum((sum(r) / k - grand) ** 2 for r in data)
    ssc = n * sum((sum(r[j] for r in data) / n - grand) ** 2 for j in range(k))
    sst = sum((v - grand) ** 2 for r in data for v in r)
    sse = sst - ssr - ssc
    R, C, E = ssr / (n - 1), ssc / (k - 1), sse / ((n - 1) * (k - 1))
    return (R - E) / (R + (k - 1) * E + k * (C - E) / n), (R, C, E)


def brute_scores(p, g):
    tp = fp = fn = 0
    for x, y in zip(np.ravel(p), np.ravel(g)):
        tp += bool(x and y)
        fp += bool(x and not y)
        fn += bool(y and not x)
    return tp, fp, fn


def test_scores_examples():
    g = np.array([[1, 1, 1, 1]], bool)
    s = confusion_scores(g, g)
    assert (s.dice, s.recall, s.precision, s.mse) == (1.0, 1.0, 1.0, 0.0)
    assert confusion_scores(np.array([[1, 0]], bool), np.array([[0, 1]], bool)).dice == 0.0
    p = np.array([[1, 1, 0, 0]], bool)
    s = confusion_scores(p, g)
    assert s.dice == pytest.approx(2 * 2 / 6) and s.recall == 0.5 and s.precision == 1.0
    assert s.mse == pytest.approx(0.5 * MSE_SCALE)


def test_empty_conventions():
    z = np.zeros((3, 3), bool)
    o = np.ones((3, 3), bool)
    s = confusion_scores(z, z)
    assert (s.dice, s.recall, s.precision) == (1.0, 1.0, 1.0)
    assert confusion_scores(o, z).recall == 0.0
    assert confusion_scores(z, o).precision == 0.0
    with pytest.raises(DimensionMismatch):
        confusion_scores(z, np.zeros((2, 3), bool))


def test_scores_match_bruteforce(rng):
    for _ in range(200):
        p = rng.random((8, 8)) < rng.random()
        g = rng.random((8, 8)) < rng.random()
        tp, fp, fn = brute_scores(p, g)
        s = confusion_scores(p, g)
        if tp + fp + fn:
            assert s.dice == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
        if tp + fn:
            assert s.recall == pytest.approx(tp / (tp + fn), abs=1e-12)
        if tp + fp:
            assert s.precision == pytest.approx(tp / (tp + fp), abs=1e-12)
        if s.recall + s.precision > 0:
            hm = 2 * s.recall * s.precision / (s.recall + s.precision)
            assert abs(s.dice - hm) < 1e-12


def test_soft_dice_examples():
    assert soft_dice(np.full((2, 2), 0.5), np.ones((2, 2))) == pytest.approx(0.8, abs=1e-15)
    x = np.random.default_rng(2).random((5, 5))
    assert soft_dice(x, x) == 1.0
    assert soft_dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_soft_dice_binary_reduction(p, g):
    if p.any() or g.any():
        assert soft_dice(p, g) == confusion_scores(p, g).dice


def test_icc_toy_oracle():
    a, b = np.array([1.0, 2, 3, 4]), np.array([2.0, 3, 4, 5])
    ref, (R, C, E) = anova_icc(a, b)
    assert icc(a, b) == pytest.approx(ref, abs=1e-12)
    assert icc(a, b) == pytest.approx(10 / 13, abs=1e-12)
    r, c, m, n = icc_mean_squares(a, b)
    assert (r, c, m, n) == pytest.approx((R, C, E, 4), abs=1e-12)


def test_icc_identical_is_one():
    x = np.random.default_rng(5).random((8, 8))
    assert icc(x, x) == 1.0


def test_icc_permutation_low():
    rng = np.random.default_rng(7)
    a = rng.random(64)
    b = rng.permutation(a)
    val = icc(a, b)
    assert val == pytest.approx(anova_icc(a, b)[0], abs=1e-12)
    assert val < 0.5


def test_icc_random_oracle_and_symmetry(rng):
    for _ in range(200):
        a = rng.random((8, 8)) * rng.integers(1, 5)
        b = rng.random((8, 8))
        assert icc(a, b) == pytest.approx(anova_icc(a, b)[0], abs=1e-9)
        assert icc(a, b) == pytest.approx(icc(b, a), abs=1e-12)


def test_icc_degenerate():
    with pytest.raises(DegenerateVariance):
        icc(np.zeros((4, 4)), np.zeros((4, 4)))


def test_human_variability():
    m = np.zeros((8, 8), bool)
    m[2:5, 2:6] = True
    s, v = human_variability(m, m)
    assert s.dice == 1.0 and v == 1.0
    b = m.copy()
    b[5, 2:6] = True
    s, _ = human_variability(m, b)
    assert s.recall == 1.0 and s.precision == pytest.approx(12 / 16)


def t_two_sided_reference(d):
    n = len(d)
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    t = mean / math.sqrt(var / n)
    df = n - 1
    x = df / (df + t * t)
    return float(mpmath.betainc(df / 2.0, 0.5, 0, x, regularized=True))


def test_t_test_reference():
    rng = np.random.default_rng(11)
    a = rng.normal(0.7, 0.1, 20)
    b = a - rng.normal(0.03, 0.05, 20)
    p = paired_t_test(a, b)
    assert p == pytest.approx(t_two_sided_reference((a - b).tolist()), abs=1e-6)


def test_t_test_degenerate():
    a = np.linspace(0, 1, 10)
    with pytest.raises(DegenerateDifferences):
        paired_t_test(a, a)
    assert paired_t_test(a + 1.0, a) == 0.0
