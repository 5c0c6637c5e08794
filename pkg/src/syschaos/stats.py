"""Mann-Whitney U test and the distribution comparisons built on it.

Everything here is a pure function over plain sequences of floats. Ranks are
tracked doubled (as integers) so that U, and therefore the p-value, is
computed identically whichever sample is passed first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

DEFAULT_ALPHA = 0.01
# Exact enumeration is used only when both samples are at most this long and
# the pooled data has no ties.
EXACT_MAX_SIZE = 10


class EmptySampleError(ValueError):
    pass


class NonFiniteValueError(ValueError):
    pass


class Method(str, Enum):
    EXACT = "exact"
    NORMAL = "normal-approximation"


@dataclass(frozen=True)
class ComparisonResult:
    u_statistic: float
    p_value: float
    method: Method


def _check_sample(values: Sequence[float], label: str) -> list[float]:
    out = [float(v) for v in values]
    if not out:
        raise EmptySampleError(f"sample {label} is empty")
    for v in out:
        if not math.isfinite(v):
            raise NonFiniteValueError(f"sample {label} contains non-finite value {v!r}")
    return out


def _doubled_ranks(pooled: list[float]) -> tuple[list[int], list[int]]:
    """Return 2*rank for each pooled value (midranks for ties) and tie group sizes."""
    order = sorted(range(len(pooled)), key=pooled.__getitem__)
    ranks = [0] * len(pooled)
    ties = []
    i = 0
    n = len(order)
    while i < n:
        j = i
        while j + 1 < n and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        # positions i..j (0-based) share rank ((i+1)+(j+1))/2
        for k in range(i, j + 1):
            ranks[order[k]] = i + j + 2
        ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of rank arrangements yielding each U value, for U = 0..n1*n2."""
    # f(m, n, u) = f(m-1, n, u-n) + f(m, n-1, u): the largest pooled value
    # either belongs to the first sample (beating all n) or to the second.
    size = n1 * n2 + 1
    prev = [[1] + [0] * (size - 1) for _ in range(n1 + 1)]  # n = 0
    for n in range(1, n2 + 1):
        cur = [[1] + [0] * (size - 1)]  # m = 0
        for m in range(1, n1 + 1):
            left, up = cur[m - 1], prev[m]
            cur.append([up[u] + (left[u - n] if u >= n else 0) for u in range(size)])
        prev = cur
    return tuple(prev[n1])


def _exact_p(n1: int, n2: int, u_min: float) -> float:
    counts = _u_counts(min(n1, n2), max(n1, n2))
    tail = sum(counts[: int(u_min) + 1])
    return min(1.0, 2.0 * tail / math.comb(n1 + n2, n1))


def _normal_p(n1: int, n2: int, u_min: float, ties: list[int]) -> float:
    n = n1 + n2
    tie_term = sum(t**3 - t for t in ties)
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0.0:
        return 1.0
    mean = n1 * n2 / 2.0
    z = (abs(u_min - mean) - 0.5) / math.sqrt(var)
    if z <= 0.0:
        return 1.0
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney_u(
    a: Sequence[float], b: Sequence[float], *, method: Method | str | None = None
) -> ComparisonResult:
    """Two-sided Mann-Whitney U test of ``a`` against ``b``.

    By default the exact null distribution is enumerated when both samples
    hold at most ``EXACT_MAX_SIZE`` values and there are no ties; otherwise
    the tie-corrected normal approximation with continuity correction is used.
    Passing ``method`` forces one path (exact still refuses tied data).
    """
    xa = _check_sample(a, "a")
    xb = _check_sample(b, "b")
    n1, n2 = len(xa), len(xb)
    pooled = xa + xb

    ranks2, ties = _doubled_ranks(pooled)
    # 2*U_a = 2*R_a - n1*(n1+1), kept integral
    u2_a = sum(ranks2[:n1]) - n1 * (n1 + 1)
    u2_min = min(u2_a, 2 * n1 * n2 - u2_a)
    u_min = u2_min / 2.0
    tie_free = all(t == 1 for t in ties)

    if method is None:
        chosen = Method.EXACT if tie_free and n1 <= EXACT_MAX_SIZE and n2 <= EXACT_MAX_SIZE else Method.NORMAL
    else:
        chosen = Method(method)
        if chosen is Method.EXACT and not tie_free:
            raise ValueError("exact method requires tie-free samples")

    if len(ties) == 1:
        # every pooled value identical
        return ComparisonResult(u_min, 1.0, chosen)
    if chosen is Method.EXACT:
        p = _exact_p(n1, n2, u_min)
    else:
        p = _normal_p(n1, n2, u_min, ties)
    return ComparisonResult(u_min, p, chosen)


def is_distinguishable(a: Sequence[float], b: Sequence[float], alpha: float = DEFAULT_ALPHA) -> bool:
    """True when the null hypothesis of equal distributions is rejected at ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return mann_whitney_u(a, b).p_value < alpha
