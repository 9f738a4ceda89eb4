"""Top-k ranking metrics with binary relevance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

KS = (1, 2, 3)


@dataclass(frozen=True)
class RankedList:
    """Candidates in descending score order; ties go to the smaller user index."""

    record_id: int
    candidates: tuple[int, ...]
    scores: tuple[float, ...]
    truth: frozenset

    @classmethod
    def from_scores(cls, record_id: int, candidates, scores, truth) -> "RankedList":
        candidates = np.asarray(candidates, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((candidates, -scores))
        return cls(
            int(record_id),
            tuple(candidates[order].tolist()),
            tuple(scores[order].tolist()),
            frozenset(int(t) for t in truth),
        )

    def hits(self) -> np.ndarray:
        return np.array([c in self.truth for c in self.candidates], dtype=bool)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def recall_at_k(ranked: RankedList, k: int) -> float:
    """``|top-k ∩ truth| / |truth|``."""
    _check_k(k)
    if not ranked.truth:
        raise ValueError("ranked list has an empty ground-truth set")
    top = ranked.candidates[:k]
    return sum(c in ranked.truth for c in top) / len(ranked.truth)


def ideal_dcg(n_hits: int) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, n_hits + 1))


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    """DCG with gain ``1/log2(1 + rank)`` over the ideal DCG of ``min(k, |truth|)`` hits."""
    _check_k(k)
    if not ranked.truth:
        raise ValueError("ranked list has an empty ground-truth set")
    dcg = sum(1.0 / math.log2(r + 2) for r, c in enumerate(ranked.candidates[:k]) if c in ranked.truth)
    return dcg / ideal_dcg(min(k, len(ranked.truth)))


def mean_metrics(ranked_lists: Sequence[RankedList], ks=KS) -> dict[str, float]:
    """Unweighted means of recall@k and ndcg@k. Summation is in fixed (sorted record id) order."""
    lists = sorted(ranked_lists, key=lambda r: r.record_id)
    out = {}
    n = len(lists)
    for k in ks:
        out[f"recall@{k}"] = math.fsum(recall_at_k(r, k) for r in lists) / n if n else 0.0
        out[f"ndcg@{k}"] = math.fsum(ndcg_at_k(r, k) for r in lists) / n if n else 0.0
    return out
