"""Paired signed-rank test with exact small-sample enumeration."""

from __future__ import annotations

import numpy as np
from scipy import stats as spstats

EXACT_LIMIT = 12
_TIE_EPS = 1e-9


def _midranks(values: np.ndarray) -> np.ndarray:
    return spstats.rankdata(values, method="average")


def wilcoxon_signed_rank(
    a: np.ndarray,
    b: np.ndarray,
    one_sided: bool = True,
    exact_limit: int = EXACT_LIMIT,
) -> float:
    """P-value of the signed-rank test for paired samples.

    Zero differences are dropped (all-zero pairs return 1 by convention).
    Up to *exact_limit* nonzero pairs the null is enumerated over all sign
    patterns with the observed midranks; larger samples use the normal
    approximation with tie and continuity corrections. The one-sided
    alternative is "a exceeds b".
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_limit:
        patterns = np.arange(2**n)
        bits = (patterns[:, None] >> np.arange(n)) & 1
        sums = bits @ ranks
        p_ge = float(np.mean(sums >= w_plus - _TIE_EPS))
        if one_sided:
            return p_ge
        p_le = float(np.mean(sums <= w_plus + _TIE_EPS))
        return float(min(1.0, 2.0 * min(p_ge, p_le)))

    mu = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / 48.0
    sigma = np.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    if sigma == 0:
        return 1.0
    z_ge = (w_plus - mu - 0.5) / sigma
    p_ge = float(spstats.norm.sf(z_ge))
    if one_sided:
        return p_ge
    z_le = (w_plus - mu + 0.5) / sigma
    p_le = float(spstats.norm.cdf(z_le))
    return float(min(1.0, 2.0 * min(p_ge, p_le)))
