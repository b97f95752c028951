"""Ranking metrics for scored process lists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankingMetrics:
    ndcg: float
    auc: float
    p_cutoff: int

    def __post_init__(self):
        for name in ("ndcg", "auc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")


def _pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if s.size == 0:
        raise ValueError("empty score vector")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def ndcg(scores, labels, p: Optional[int] = None) -> float:
    """Normalised DCG over the top ``p`` rows (default: all). No positives gives 0."""
    s, y = _pair(scores, labels)
    n = s.size
    p = n if p is None else int(p)
    if not 1 <= p <= n:
        raise ValueError("cutoff p must be in [1, N]")
    order = np.lexsort((np.arange(n), -s))[:p]
    disc = 1.0 / np.log2(np.arange(2, p + 2))
    gains = 2.0 ** y - 1.0
    dcg = float((gains[order] * disc).sum())
    ideal = np.sort(gains)[::-1][:p]
    idcg = float((ideal * disc).sum())
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def auc(scores, labels) -> float:
    """Mann-Whitney pairwise win rate; ties count one half."""
    s, y = _pair(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes")
    # rank-sum form of the pair count; average ranks handle ties
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sv = allv[order]
    ranks = np.empty(allv.size)
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def ranking_metrics(scores, labels, p: Optional[int] = None) -> RankingMetrics:
    s, _ = _pair(scores, labels)
    p = s.size if p is None else p
    return RankingMetrics(ndcg(scores, labels, p), auc(scores, labels), p)
