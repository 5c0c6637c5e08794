"""Independent reference computations used by the test-suite."""

from __future__ import annotations

import itertools
from collections import Counter
from functools import lru_cache

from scipy import stats as sps


@lru_cache(maxsize=None)
def _u_distribution(n1: int, n2: int) -> tuple[Counter, int]:
    # every way of choosing which pooled ranks belong to the first sample
    n = n1 + n2
    dist: Counter = Counter()
    total = 0
    for picked in itertools.combinations(range(1, n + 1), n1):
        dist[sum(picked) - n1 * (n1 + 1) // 2] += 1
        total += 1
    return dist, total


def brute_force_p(a: list[float], b: list[float]) -> float:
    """Two-sided exact Mann-Whitney p by enumerating rank partitions (tie-free data)."""
    pooled = sorted(a + b)
    if len(set(pooled)) != len(pooled):
        raise ValueError("oracle handles tie-free samples only")
    rank = {v: i + 1 for i, v in enumerate(pooled)}
    u_obs = sum(rank[v] for v in a) - len(a) * (len(a) + 1) // 2
    dist, total = _u_distribution(len(a), len(b))
    lower = sum(c for u, c in dist.items() if u <= u_obs)
    upper = sum(c for u, c in dist.items() if u >= u_obs)
    return min(1.0, 2 * min(lower, upper) / total)


def binomial_interval(n: int, p: float, confidence: float) -> tuple[float, float]:
    """Two-sided central interval for the success fraction of Binomial(n, p)."""
    tail = (1 - confidence) / 2
    lo = sps.binom.ppf(tail, n, p)
    hi = sps.binom.ppf(1 - tail, n, p)
    return lo / n, hi / n


def scipy_mwu(a, b, method: str) -> float:
    return float(sps.mannwhitneyu(a, b, alternative="two-sided", method=method, use_continuity=True).pvalue)
