import itertools

import numpy as np
import pytest

from fbttr.metrics import accuracy, c_index, pearson_r, roc_auc, wilcoxon_signed_rank


# ---------------------------------------------------------------------------
# Pair-enumeration and sign-pattern oracles.
# ---------------------------------------------------------------------------

def roc_auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def c_index_oracle(risk, time, event):
    num, den = 0.0, 0
    n = len(risk)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if time[i] < time[j] and event[i] == 1:
                den += 1
                if risk[i] > risk[j]:
                    num += 1.0
                elif risk[i] == risk[j]:
                    num += 0.5
    return num / den


def wilcoxon_oracle(a, b):
    """Exact two-tailed p by enumerating all 2^n sign patterns."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = len(d)
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(n)
    sv = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    w_obs = ranks[d > 0].sum()
    mu = n * (n + 1) / 4.0
    dev = abs(w_obs - mu)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(w - mu) >= dev - 1e-12:
            hits += 1
    return w_obs - mu, hits / 2.0**n


# ---------------------------------------------------------------------------
# pearson_r
# ---------------------------------------------------------------------------

def test_pearson_affine_invariance():
    a = np.array([1.0, 2.0, 5.0, 3.0])
    assert pearson_r(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-14)
    assert pearson_r(a, -a) == pytest.approx(-1.0, abs=1e-14)


def test_pearson_hand_computed():
    assert pearson_r([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-14)


def test_pearson_zero_variance_errors():
    with pytest.raises(ValueError):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson_r([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])


def test_pearson_length_checks():
    with pytest.raises(ValueError):
        pearson_r([1.0], [2.0])
    with pytest.raises(ValueError):
        pearson_r([1.0, 2.0], [1.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# roc_auc
# ---------------------------------------------------------------------------

def test_roc_auc_separating_and_tied():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_roc_auc_documented_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-14)


def test_roc_auc_single_class_errors():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_pair_enumeration_exhaustive():
    # all label patterns with both classes present, up to 8 samples
    rng = np.random.default_rng(0)
    for n in range(2, 9):
        scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
        for bits in range(1, 2**n - 1):
            labels = [(bits >> i) & 1 for i in range(n)]
            assert roc_auc(scores, labels) == pytest.approx(
                roc_auc_oracle(scores, labels), abs=1e-12
            )


def test_roc_auc_monotone_transform_invariant():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=30)
    labels = (rng.random(30) > 0.5).astype(int)
    if labels.sum() in (0, 30):
        labels[0] = 1 - labels[0]
    assert roc_auc(np.exp(scores), labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------

def test_accuracy_basic():
    assert accuracy([0.0, 1.0, 1.0], [0, 1, 1]) == 1.0
    assert accuracy([1.0, 0.0], [0, 1]) == 0.0
    assert accuracy([0.6, 0.4], [1, 1]) == 0.5


# ---------------------------------------------------------------------------
# c_index
# ---------------------------------------------------------------------------

def test_c_index_perfect_anti_ordering():
    time = np.array([3.0, 2.0, 1.0])
    risk = np.array([1.0, 2.0, 3.0])
    assert c_index(risk, time, [1, 1, 1]) == 1.0


def test_c_index_all_censored_errors():
    with pytest.raises(ValueError):
        c_index([1.0, 2.0], [1.0, 2.0], [0, 0])


def test_c_index_documented_example():
    got = c_index([3.0, 1.0, 2.0], [1.0, 2.0, 3.0], [1, 1, 0])
    assert got == pytest.approx(2.0 / 3.0, abs=1e-14)


def test_c_index_matches_pair_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(3, 9))
        risk = np.round(rng.normal(size=n), 1)
        time = np.round(rng.exponential(size=n), 1)
        event = (rng.random(n) > 0.4).astype(int)
        try:
            expected = c_index_oracle(risk, time, event)
        except ZeroDivisionError:
            with pytest.raises(ValueError):
                c_index(risk, time, event)
            continue
        assert c_index(risk, time, event) == pytest.approx(expected, abs=1e-12)


def test_c_index_monotone_transform_invariant():
    rng = np.random.default_rng(3)
    risk = rng.normal(size=20)
    time = rng.exponential(size=20)
    event = np.ones(20, dtype=int)
    assert c_index(np.exp(risk), time, event) == pytest.approx(
        c_index(risk, time, event), abs=1e-12
    )


# ---------------------------------------------------------------------------
# wilcoxon signed-rank
# ---------------------------------------------------------------------------

def test_wilcoxon_all_zero_differences_errors():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_wilcoxon_n5_all_positive_exact_minimum():
    a = np.array([2.0, 3.0, 4.0, 5.0, 6.0])
    b = np.array([1.0, 1.5, 2.0, 2.5, 3.0])
    stat, p = wilcoxon_signed_rank(a, b)
    assert p == pytest.approx(2.0 / 32.0, abs=1e-15)
    assert stat == pytest.approx(15.0 - 7.5)


def test_wilcoxon_swap_negates_statistic():
    rng = np.random.default_rng(4)
    a = rng.normal(size=10)
    b = rng.normal(size=10)
    s1, p1 = wilcoxon_signed_rank(a, b)
    s2, p2 = wilcoxon_signed_rank(b, a)
    assert s1 == pytest.approx(-s2, abs=1e-12)
    assert p1 == pytest.approx(p2, abs=1e-15)


def test_wilcoxon_exact_matches_full_enumeration():
    rng = np.random.default_rng(5)
    for n in range(2, 13):
        for _ in range(5):
            a = np.round(rng.normal(size=n), 1)
            b = np.round(rng.normal(size=n), 1)
            if np.all(a == b):
                continue
            stat, p = wilcoxon_signed_rank(a, b)
            o_stat, o_p = wilcoxon_oracle(a, b)
            assert stat == pytest.approx(o_stat, abs=1e-12)
            assert p == pytest.approx(o_p, abs=1e-12)


def test_wilcoxon_large_n_normal_approximation():
    rng = np.random.default_rng(6)
    a = rng.normal(size=50)
    b = a - 0.8 - 0.1 * rng.normal(size=50)
    stat, p = wilcoxon_signed_rank(a, b)
    assert stat > 0
    assert 0.0 < p < 0.001

    c = rng.normal(size=50)
    d = c + 0.01 * rng.normal(size=50)
    _, p2 = wilcoxon_signed_rank(c, d)
    assert 0.0 < p2 <= 1.0
