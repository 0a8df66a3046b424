"""Top-K ranking metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


def recall_at_k(recommended: Sequence[int], relevant, k: int = 10) -> float | None:
    """|top-k ∩ relevant| / |relevant|; ``None`` when ``relevant`` is empty."""
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return None
    hits = sum(1 for x in list(recommended)[:k] if int(x) in relevant)
    return hits / len(relevant)


def ndcg_at_k(recommended: Sequence[int], relevant, k: int = 10) -> float | None:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(list(recommended)[:k]) if int(x) in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), k)))
    return dcg / idcg


@dataclass
class MetricReport:
    k: int
    recall: float
    ndcg: float
    per_user: dict[int, tuple[float, float]] = field(default_factory=dict)

    def as_row(self) -> dict:
        return {f"recall@{self.k}": self.recall, f"ndcg@{self.k}": self.ndcg, "users": len(self.per_user)}


def evaluate(recommendations: Mapping[int, Sequence[int]], truth: Mapping[int, Sequence[int]], k: int = 10) -> MetricReport:
    """Average Recall@k / NDCG@k over users with a non-empty truth set."""
    per_user = {}
    for u in sorted(truth):
        rel = truth[u]
        if len(rel) == 0:
            continue
        rec = recommendations.get(u, [])
        per_user[u] = (recall_at_k(rec, rel, k), ndcg_at_k(rec, rel, k))
    if not per_user:
        return MetricReport(k, 0.0, 0.0, {})
    vals = np.array(list(per_user.values()))
    return MetricReport(k, float(vals[:, 0].mean()), float(vals[:, 1].mean()), per_user)


def top_k_scores(scores: np.ndarray, k: int, exclude: Sequence[int] = ()) -> np.ndarray:
    """Indices of the k largest scores (descending, ties by lower index), skipping ``exclude``."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    if len(exclude):
        scores[np.asarray(exclude, dtype=np.int64)] = -np.inf
    n_valid = int(np.isfinite(scores).sum())
    k = min(k, n_valid)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    part = np.argpartition(-scores, k - 1)[:k] if k < len(scores) else np.arange(len(scores))
    order = np.lexsort((part, -scores[part]))
    return part[order][:k]
