"""Leave-one-out ranking metrics with sampled negatives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

DEFAULT_KS = (2, 5, 10)
N_NEGATIVES = 99


class EvaluationError(ValueError):
    pass


@dataclass
class RankingMetrics:
    ndcg_at: Dict[int, float] = field(default_factory=dict)
    mrr_at: Dict[int, float] = field(default_factory=dict)
    n_instances: int = 0


def rank_of_positive(scores: Sequence[float], item_ids: Sequence, positive_index: int = 0) -> int:
    """1-based rank of the positive by descending score, ties broken by ascending item id."""
    if len(set(item_ids)) != len(item_ids):
        raise EvaluationError("duplicate candidate ids")
    s = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(item_ids)
    ps, pid = s[positive_index], ids[positive_index]
    return int(1 + np.sum(s > ps) + np.sum((s == ps) & (ids < pid)))


def metrics_from_ranks(ranks: Iterable[int], ks: Sequence[int] = DEFAULT_KS) -> RankingMetrics:
    r = [int(x) for x in ranks]
    if not r:
        raise EvaluationError("no instances to evaluate")
    n = len(r)
    out = RankingMetrics(n_instances=n)
    # exactly rounded sums keep the means independent of instance order
    for k in ks:
        out.ndcg_at[k] = math.fsum(1.0 / math.log2(x + 1) for x in r if x <= k) / n
        out.mrr_at[k] = math.fsum(1.0 / x for x in r if x <= k) / n
    return out


def evaluate_ranking(scores: np.ndarray, item_ids: np.ndarray, ks: Sequence[int] = DEFAULT_KS,
                     n_candidates: int = N_NEGATIVES + 1) -> RankingMetrics:
    """Metrics for ``(n_instances, 100)`` score/id arrays; column 0 is the positive."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    item_ids = np.atleast_2d(np.asarray(item_ids))
    if scores.shape != item_ids.shape or scores.shape[1] != n_candidates:
        raise EvaluationError(f"expected (n, {n_candidates}) scores and ids, got {scores.shape} / {item_ids.shape}")
    srt = np.sort(item_ids, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise EvaluationError("duplicate candidate ids")
    pos_s, pos_id = scores[:, :1], item_ids[:, :1]
    ranks = 1 + np.sum(scores > pos_s, axis=1) + np.sum((scores == pos_s) & (item_ids < pos_id), axis=1)
    return metrics_from_ranks(ranks, ks)


def expected_random_ndcg(k: int, n_candidates: int = N_NEGATIVES + 1) -> float:
    """NDCG@k of a uniformly random ranking: the positive's rank is uniform on 1..n."""
    return sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n_candidates) + 1)) / n_candidates


def sample_negatives(rng: np.random.Generator, n_items: int, exclude: Iterable[int],
                     n: int = N_NEGATIVES) -> np.ndarray:
    """``n`` distinct item indices in ``[0, n_items)`` avoiding ``exclude``."""
    excl = np.zeros(n_items, dtype=bool)
    excl[list(exclude)] = True
    pool = np.flatnonzero(~excl)
    if pool.size < n:
        raise EvaluationError(f"only {pool.size} eligible negatives, need {n}")
    return rng.choice(pool, size=n, replace=False)


def write_metrics_csv(path: Path, rows: List[Tuple[str, str, RankingMetrics]]) -> None:
    """Rows of ``(model, domain, metrics)`` as ``model,domain,K,ndcg,mrr,n_instances``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "domain", "K", "ndcg", "mrr", "n_instances"])
        for model, domain, m in rows:
            for k in sorted(m.ndcg_at):
                w.writerow([model, domain, k, f"{m.ndcg_at[k]:.6f}", f"{m.mrr_at[k]:.6f}", m.n_instances])
