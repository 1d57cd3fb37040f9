"""Near-duplicate search between synthetic and private samples (all pairs, no index)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np


@dataclass
class AuditResult:
    metric: str
    nearest_index: np.ndarray  # per synthetic sample, index into the private set
    nearest_score: np.ndarray  # cosine similarity, or euclidean distance
    top_pairs: List[Dict]

    def max_similarity(self) -> float:
        return float(self.nearest_score.max() if self.metric == "cosine" else -self.nearest_score.min())

    def summary(self, bins: int = 10) -> Dict:
        counts, edges = np.histogram(self.nearest_score, bins=bins)
        return {
            "metric": self.metric,
            "n_synthetic": int(len(self.nearest_score)),
            "top_pairs": self.top_pairs,
            "nearest_score_mean": float(self.nearest_score.mean()),
            "nearest_score_max": float(self.nearest_score.max()),
            "nearest_score_min": float(self.nearest_score.min()),
            "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        }


def _scores(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
        return an @ bn.T
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def top_k_similar(synthetic: np.ndarray, private: np.ndarray, k: int = 3,
                  metric: str = "cosine", chunk: int = 1024) -> AuditResult:
    """Nearest private sample for every synthetic one, plus the ``k`` closest pairs overall.

    Higher is closer for cosine; lower is closer for euclidean. Ties break
    toward the lower synthetic, then private, index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    synthetic = np.asarray(synthetic, dtype=np.float64)
    private = np.asarray(private, dtype=np.float64)
    if len(synthetic) == 0 or len(private) == 0:
        raise ValueError("empty input")
    sign = 1.0 if metric == "cosine" else -1.0
    best_idx = np.empty(len(synthetic), dtype=np.int64)
    best = np.empty(len(synthetic))
    for start in range(0, len(synthetic), chunk):
        s = sign * _scores(synthetic[start:start + chunk], private, metric)
        j = s.argmax(axis=1)
        best_idx[start:start + chunk] = j
        best[start:start + chunk] = s[np.arange(len(j)), j]
    order = np.lexsort((best_idx, np.arange(len(best)), -best))[:k]
    pairs = [{"rank": r + 1, "synthetic": int(i), "private": int(best_idx[i]), "score": float(sign * best[i])}
             for r, i in enumerate(order)]
    return AuditResult(metric, best_idx, sign * best, pairs)
