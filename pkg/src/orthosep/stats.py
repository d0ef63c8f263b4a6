"""Two-sided Mann-Whitney U test with an exact path and a normal approximation.

The exact path counts, over every way of drawing ``n1`` of the pooled
observations, how many give a rank sum at least as far from its null mean as
the observed one. Ranks are mid-ranks, doubled so ties stay integral, and the
count is done by a subset-sum dynamic programme instead of enumerating
``C(n1 + n2, n1)`` splits.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_MIN_N = 8
EXACT_MAX_TOTAL = 40
EXACT_MAX_POOLED = 1000


class DegenerateSampleError(ValueError):
    pass


def _prepare(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        raise DegenerateSampleError("all observations are tied")
    return a, b, rankdata(pooled)


def u_statistic(a, b) -> float:
    a, b, ranks = _prepare(a, b)
    n1 = a.size
    return float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)


def _subset_sum_counts(values: np.ndarray, k: int) -> np.ndarray:
    """``counts[s]`` = number of k-subsets of ``values`` (non-negative ints) summing to ``s``."""
    total = int(np.sort(values)[::-1][:k].sum())
    # float counts: exact up to 2**53, far beyond what the p-value resolution needs
    dp = np.zeros((k + 1, total + 1))
    dp[0, 0] = 1.0
    for v in values:
        v = int(v)
        # go downward in subset size so each value is used at most once
        for j in range(k, 0, -1):
            if v:
                dp[j, v:] += dp[j - 1, :-v]
            else:
                dp[j] += dp[j - 1]
    return dp[k]


def exact_p_value(a, b) -> float:
    a, b, ranks = _prepare(a, b)
    n1, n2 = a.size, b.size
    doubled = np.rint(2 * ranks).astype(np.int64)
    k = min(n1, n2)
    observed = int(doubled[:n1].sum()) if k == n1 else int(doubled[n1:].sum())
    counts = _subset_sum_counts(doubled, k)
    mean2 = k * (n1 + n2 + 1)  # null mean of the doubled rank sum
    sums = np.arange(counts.size)
    extreme = np.abs(sums - mean2) >= abs(observed - mean2)
    return float(min(1.0, counts[extreme].sum() / math.comb(n1 + n2, k)))


def normal_p_value(a, b, continuity: bool = True) -> float:
    a, b, ranks = _prepare(a, b)
    n1, n2 = a.size, b.size
    n = n1 + n2
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        raise DegenerateSampleError("zero variance under the null")
    dev = abs(u - mu) - (0.5 if continuity else 0.0)
    z = max(dev, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def rank_sum_test(a, b, method: str = "auto") -> float:
    """Two-sided p-value. ``method`` is ``"exact"``, ``"normal"`` or ``"auto"``."""
    if method == "auto":
        n1, n2 = np.size(a), np.size(b)
        small = min(n1, n2) <= EXACT_MAX_MIN_N and n1 + n2 <= EXACT_MAX_POOLED
        method = "exact" if small or n1 + n2 <= EXACT_MAX_TOTAL else "normal"
    if method == "exact":
        return exact_p_value(a, b)
    if method == "normal":
        return normal_p_value(a, b)
    raise ValueError(f"unknown method {method!r}")
