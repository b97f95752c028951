"""Friedman and Wilcoxon signed-rank tests, plus the staged-improvement summary."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata


class StatConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StatTestResult:
    test: str
    statistic: float
    p_value: float
    significant: bool
    n: int = 0
    method: str = ""
    flags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")


def _result(test, stat, p, n, method, flags=()):
    p = float(min(1.0, max(0.0, p)))
    return StatTestResult(test, float(stat), p, p < 0.05, n, method, tuple(flags))


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution (regularised upper incomplete gamma)."""
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


def avg_incremental_improvement(p1: float, p2: float, p3: float) -> float:
    """Mean of the P1->P2 and P2->P3 relative gains, in percent."""
    if p1 <= 0 or p2 <= 0:
        raise StatConfigError("improvement undefined for nonpositive P1 or P2")
    return 0.5 * ((p2 - p1) / p1 + (p3 - p2) / p2) * 100.0


# ------------------------------------------------------------------ Friedman


def _friedman_stat(R, n, k, tie_term):
    denom = n * k * (k + 1) - tie_term / (k - 1)
    if denom <= 0:
        return 0.0
    return 12.0 * float(((R - n * (k + 1) / 2.0) ** 2).sum()) / denom


def _friedman_exact_p(ranks, observed, tie_term, max_states):
    """P(stat >= observed) over independent within-block permutations.

    Dynamic programme over the vector of (doubled, hence integer) rank sums;
    returns None if the state space grows past ``max_states``.
    """
    n, k = ranks.shape
    dist = {tuple([0] * k): 1}
    for row in (2 * ranks).astype(np.int64):
        perms = set(permutations(row.tolist()))
        w = 1.0 / len(perms)
        nxt = defaultdict(float)
        for state, pr in dist.items():
            for pm in perms:
                nxt[tuple(a + b for a, b in zip(state, pm))] += pr * w
        if len(nxt) > max_states:
            return None
        dist = nxt
    tail = 0.0
    for state, pr in dist.items():
        s = _friedman_stat(np.array(state) / 2.0, n, k, tie_term)
        if s >= observed - 1e-9:
            tail += pr
    return tail


def friedman_test(matrix, method: str = "chi2", max_states: int = 200_000) -> StatTestResult:
    """Friedman test with blocks as rows and treatments as columns.

    ``method="chi2"`` uses the chi-square(k-1) tail; ``"exact"`` enumerates the
    within-block permutation distribution (falls back to chi2 when too large).
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2 or M.shape[1] < 2:
        raise StatConfigError("Friedman needs a 2-D matrix with >= 2 blocks and >= 2 treatments")
    if not np.all(np.isfinite(M)):
        raise StatConfigError("Friedman input contains non-finite values")
    if method not in ("chi2", "exact"):
        raise StatConfigError(f"unknown method {method!r}")
    n, k = M.shape
    ranks = np.vstack([rankdata(row) for row in M])
    tie_term = 0.0
    for row in M:
        _, counts = np.unique(row, return_counts=True)
        tie_term += float((counts ** 3 - counts).sum())
    stat = _friedman_stat(ranks.sum(axis=0), n, k, tie_term)
    if stat == 0.0:
        return _result("Friedman", 0.0, 1.0, n, method)
    if method == "exact":
        p = _friedman_exact_p(ranks, stat, tie_term, max_states)
        if p is not None:
            return _result("Friedman", stat, p, n, "exact")
        method = "chi2"
    return _result("Friedman", stat, chi2_sf(stat, k - 1), n, method)


# ------------------------------------------------------------------ Wilcoxon


def _signed_rank_null(ranks2):
    """Null distribution of W+ (in doubled-rank units) as {value: probability}."""
    dist = {0: 1.0}
    for r in ranks2:
        nxt = defaultdict(float)
        for v, p in dist.items():
            nxt[v] += 0.5 * p
            nxt[v + r] += 0.5 * p
        dist = nxt
    return dict(dist)


def wilcoxon_null_distribution(d) -> dict:
    """Exact null of W+ for the nonzero differences in ``d`` (keys in rank units)."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    return {v / 2.0: p for v, p in _signed_rank_null(ranks2.tolist()).items()}


def wilcoxon_signed_rank(a, b, method: str = "auto") -> StatTestResult:
    """Two-sided paired signed-rank test; statistic T = min(W+, W-).

    Zero differences are dropped and ties get mean ranks. ``auto`` is exact for
    fewer than 20 nonzero differences and normal-approximate otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise StatConfigError("paired samples differ in length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return _result("Wilcoxon", 0.0, 1.0, 0, "degenerate", ("all_differences_zero",))
    if method not in ("auto", "exact", "normal"):
        raise StatConfigError(f"unknown method {method!r}")
    if method == "auto":
        method = "exact" if n < 20 else "normal"
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    T = min(w_plus, w_minus)
    flags = ("few_differences",) if n < 5 else ()
    if method == "exact":
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        null = _signed_rank_null(ranks2.tolist())
        t2 = int(round(2 * T))
        lower = sum(p for v, p in null.items() if v <= t2)
        return _result("Wilcoxon", T, 2.0 * lower, n, "exact", flags)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    if var <= 0:
        return _result("Wilcoxon", T, 1.0, n, "normal", flags)
    # T <= mean, so the continuity correction moves it up by one half
    z = (T - mean + 0.5) / math.sqrt(var)
    z = min(z, 0.0)
    p = math.erfc(-z / math.sqrt(2.0))
    return _result("Wilcoxon", T, p, n, "normal", flags)
