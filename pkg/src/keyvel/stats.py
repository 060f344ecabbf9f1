"""Nonparametric statistical tests for the strategy comparison.

Shapiro-Wilk normality (Royston's approximation), tie-corrected
Kruskal-Wallis, exact/approximate Wilcoxon signed-rank, and the
Holm-Bonferroni step-down correction.
"""

import math
from typing import Sequence, Tuple

import numpy as np
from scipy.special import chdtrc, ndtr, ndtri
from scipy.stats import rankdata

# Royston (1995) polynomial coefficients for the W-statistic weights
# and the normalizing transform of 1 - W.
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coefs, x: float) -> float:
    return sum(c * x ** i for i, c in enumerate(coefs))


def shapiro_wilk(samples: Sequence[float]) -> Tuple[float, float]:
    """Shapiro-Wilk W and its p-value for 3 <= n <= 5000 samples.

    Follows Royston's AS R94: blom-score weights with polynomial
    corrections for the two extreme coefficients, then a log-normal
    transform of 1 - W to a normal deviate.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 3 or n > 5000:
        raise ValueError(f"sample size {n} outside 3..5000")
    if x[-1] - x[0] <= 0:
        raise ValueError("all samples identical; W is undefined")

    half = n // 2
    m = ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))  # lower half, < 0
    summ2 = 2.0 * float(np.sum(m ** 2))

    a = np.empty(half)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) - m[0] / ssumm2
        if n > 5:
            a2 = _poly(_C2, rsn) - m[1] / ssumm2
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                            / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
            a[1] = a2
            first_mid = 2
        else:
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
            first_mid = 1
        a[0] = a1
        a[first_mid:] = -m[first_mid:] / fac

    # antisymmetric weights: W = (sum a_i (x_(n+1-i) - x_(i)))^2 / SSQ
    sax = float(np.sum(a * (x[::-1][:half] - x[:half])))
    ssq = float(np.sum((x - x.mean()) ** 2))
    w = min(1.0, sax * sax / ssq)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, min(1.0, max(0.0, p))
    y = math.log(1.0 - w)
    if n <= 11:
        gamma = _poly(_G, float(n))
        if y >= gamma:
            return w, 0.0
        y = -math.log(gamma - y)
        mu = _poly(_C3, float(n))
        sigma = math.exp(_poly(_C4, float(n)))
    else:
        ln_n = math.log(n)
        mu = _poly(_C5, ln_n)
        sigma = math.exp(_poly(_C6, ln_n))
    p = 1.0 - float(ndtr((y - mu) / sigma))
    return w, p


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-square p-value."""
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(len(g) < 2 for g in arrays):
        raise ValueError("every group needs at least 2 samples")
    pooled = np.concatenate(arrays)
    n = len(pooled)
    if np.all(pooled == pooled[0]):
        return 0.0, 1.0
    ranks = rankdata(pooled)
    h = 0.0
    start = 0
    for g in arrays:
        r = ranks[start:start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, tie_counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / (n ** 3 - n)
    h /= correction
    p = float(chdtrc(len(arrays) - 1, h))
    return float(h), p


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign assignments with doubled rank-sum s."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        prev = counts.copy()
        counts[r:] += prev[:total + 1 - r]
    return counts


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         alternative: str = "two-sided",
                         exact_threshold: int = 25) -> Tuple[float, float]:
    """Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. Up to `exact_threshold` non-zero
    pairs the p-value is exact (dynamic program over all sign
    assignments, ties handled through doubled average ranks); beyond
    that a normal approximation with tie and continuity corrections is
    used. W is the positive-difference rank sum.

    alternative: "two-sided", "greater" (x tends above y), or "less".
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())

    if n <= exact_threshold:
        doubled = np.rint(2.0 * ranks).astype(int)
        counts = _signed_rank_counts(doubled)
        total = 2.0 ** n
        wd = int(round(2.0 * w))
        p_le = counts[:wd + 1].sum() / total
        p_ge = counts[wd:].sum() / total
        if alternative == "greater":
            p = p_ge
        elif alternative == "less":
            p = p_le
        else:
            p = min(1.0, 2.0 * min(p_le, p_ge))
        return w, float(p)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 \
        - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    sigma = math.sqrt(var)
    if alternative == "greater":
        p = 1.0 - float(ndtr((w - mean - 0.5) / sigma))
    elif alternative == "less":
        p = float(ndtr((w - mean + 0.5) / sigma))
    else:
        diff = w - mean
        if diff == 0:
            return w, 1.0
        z = (diff - 0.5 * math.copysign(1.0, diff)) / sigma
        p = min(1.0, 2.0 * (1.0 - float(ndtr(abs(z)))))
    return w, float(p)


def holm_bonferroni(pvalues: Sequence[float]) -> np.ndarray:
    """Step-down Holm adjustment, returned in the input order."""
    ps = np.asarray(pvalues, dtype=float)
    if ps.size == 0:
        raise ValueError("empty p-value list")
    if np.any(ps < 0) or np.any(ps > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(ps)
    order = np.argsort(ps, kind="stable")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * ps[idx]))
        adjusted[idx] = running
    return adjusted
