"""Ranking metrics and held-out evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import EvalSet
from .errors import DataError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks, so ties contribute 1/2
    u_stat = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def precision_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    return sum(1 for i in list(ranked)[:k] if i in relevant) / k


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int = 10) -> float:
    """Binary-gain NDCG; 0 when nothing is relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(pos + 2) for pos, i in enumerate(list(ranked)[:k]) if i in relevant)
    ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(relevant))))
    return dcg / ideal


@dataclass(frozen=True)
class MetricRecord:
    auc: float
    p10: float
    ndcg10: float
    n_users: int

    def as_dict(self) -> dict:
        return asdict(self)


Scorer = Callable[[int, np.ndarray], np.ndarray]


def rank_items(item_ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Sort by score descending, ties by ascending item id."""
    item_ids = np.asarray(item_ids)
    order = np.lexsort((item_ids, -np.asarray(scores, dtype=np.float64)))
    return item_ids[order]


def evaluate(scorer: Scorer, eval_set: EvalSet, k: int = 10) -> MetricRecord:
    """Average AUC, Precision@k and NDCG@k over users.

    ``scorer(cid, candidate_ids)`` returns one score per candidate; each
    user's candidates are its held-out positives plus sampled negatives.
    """
    if not len(eval_set):
        raise DataError("empty evaluation set")
    aucs, precs, ndcgs = [], [], []
    for user in eval_set.users:
        if not user.negatives:
            continue
        candidates = np.array(user.positives + user.negatives, dtype=np.int64)
        labels = np.r_[np.ones(len(user.positives)), np.zeros(len(user.negatives))]
        scores = np.asarray(scorer(user.cid, candidates), dtype=np.float64)
        aucs.append(auc(scores, labels))
        ranked = rank_items(candidates, scores)
        precs.append(precision_at_k(ranked, user.positives, k))
        ndcgs.append(ndcg_at_k(ranked, user.positives, k))
    if not aucs:
        raise DataError("no evaluable users")
    return MetricRecord(float(np.mean(aucs)), float(np.mean(precs)), float(np.mean(ndcgs)), len(aucs))


def oracle_scorer(eval_set: EvalSet) -> Scorer:
    """Scores 1 for held-out positives, 0 otherwise."""
    truth = {u.cid: set(u.positives) for u in eval_set.users}
    return lambda cid, ids: np.array([1.0 if int(i) in truth[cid] else 0.0 for i in ids])


def random_scorer(seed: int = 0) -> Scorer:
    def score(cid: int, ids: np.ndarray) -> np.ndarray:
        return np.random.default_rng([seed, cid]).random(len(ids))

    return score


def summarize(records: Sequence[MetricRecord]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation of each metric across repeated model builds."""
    out = {}
    for name in ("auc", "p10", "ndcg10"):
        vals = np.array([getattr(r, name) for r in records])
        out[name] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def format_metrics_table(rows: dict[str, dict[str, tuple[float, float]]]) -> str:
    """Aligned text table of ``model -> metric -> (mean, std)``, values scaled by 100."""
    header = f"{'Model':<18}{'AUC':>16}{'Precision@10':>16}{'nDCG@10':>16}"
    lines = [header, "-" * len(header)]
    for model, stats in rows.items():
        cells = "".join(f"{f'{100 * m:.2f}±{100 * s:.2f}':>16}" for m, s in (stats[n] for n in ("auc", "p10", "ndcg10")))
        lines.append(f"{model:<18}{cells}")
    return "\n".join(lines)
