"""Evaluation metrics and the paired significance test used in reports."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "pearson_r",
    "roc_auc",
    "accuracy",
    "c_index",
    "wilcoxon_signed_rank",
]


def _vector(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).ravel()
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    return a


def _midranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson_r(a, b) -> float:
    """Sample Pearson correlation; zero variance in either input is an error."""
    a = _vector(a, "a")
    b = _vector(b, "b")
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("need at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ValueError("zero variance input; correlation undefined")
    r = float(da @ db) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, r))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) formulation.

    Tied scores contribute half a concordance.  Requires both classes.
    """
    scores = _vector(scores, "scores")
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise ValueError(f"length mismatch: {len(scores)} vs {len(labels)}")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = _vector(scores, "scores")
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels):
        raise ValueError(f"length mismatch: {len(scores)} vs {len(labels)}")
    pred = (scores >= threshold).astype(float)
    return float(np.mean(pred == labels))


def c_index(risk, time, event) -> float:
    """Concordance between risk ordering and survival times under censoring.

    A pair is comparable when the shorter time carries an event; ties in
    risk count one half.  Raises when no pair is comparable.
    """
    risk = _vector(risk, "risk")
    time = _vector(time, "time")
    event = np.asarray(event).ravel()
    if not (len(risk) == len(time) == len(event)):
        raise ValueError("risk, time and event must have equal length")
    if not set(np.unique(event)) <= {0, 1}:
        raise ValueError("event indicators must be 0/1")
    comparable = (time[:, None] < time[None, :]) & (event[:, None] == 1)
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise ValueError("no comparable pairs (all censored or tied times)")
    higher = risk[:, None] > risk[None, :]
    tied = risk[:, None] == risk[None, :]
    score = float((comparable & higher).sum()) + 0.5 * float((comparable & tied).sum())
    return score / n_comp


def _exact_wilcoxon_p(ranks: np.ndarray, w_plus: float) -> float:
    # distribution of W+ over all sign patterns, by convolution over the
    # doubled (integer) rank values
    doubled = np.rint(2.0 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    counts /= counts.sum()
    support = np.arange(total + 1) / 2.0
    mu = total / 4.0
    dev = abs(w_plus - mu)
    return float(counts[np.abs(support - mu) >= dev - 1e-12].sum())


def wilcoxon_signed_rank(a, b):
    """Two-tailed Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped.  Returns (statistic, p) where the
    statistic is the positive-rank sum centred at its null mean, so
    swapping the inputs negates it.  The null distribution is exact (full
    sign-pattern distribution) for n <= 20 and a tie-corrected normal
    approximation above.
    """
    a = _vector(a, "a")
    b = _vector(b, "b")
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    if n < 2:
        raise ValueError("need at least 2 nonzero differences")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    mu = n * (n + 1) / 4.0
    statistic = w_plus - mu
    if n <= 20:
        p = _exact_wilcoxon_p(ranks, w_plus)
    else:
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        z = statistic / sigma
        p = 2.0 * (1.0 - 0.5 * (1.0 + math.erf(abs(z) / math.sqrt(2.0))))
    return statistic, min(max(p, math.ulp(0.0)), 1.0)
