import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_auc
from splitrec.data import EvalSet, EvalUser
from splitrec.errors import DataError
from splitrec.evaluation import (
    MetricRecord,
    auc,
    evaluate,
    format_metrics_table,
    ndcg_at_k,
    oracle_scorer,
    precision_at_k,
    random_scorer,
    rank_items,
    summarize,
)


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert auc([3, 2, 1], [1, 0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(DataError):
        auc([1, 2], [1, 1])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_oracle(pairs):
    scores = [s for s, _ in pairs]
    labels = [int(l) for _, l in pairs]
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


@settings(max_examples=30)
@given(st.lists(st.integers(-100, 100), min_size=4, max_size=30), st.integers(1, 100), st.integers(-50, 50))
def test_auc_affine_invariant(scores, a, b):
    labels = [i % 2 for i in range(len(scores))]
    s = np.array(scores, dtype=float)
    assert auc(a * s + b, labels) == pytest.approx(auc(s, labels), abs=1e-12)


def test_precision_examples():
    ranked = list(range(10))
    assert precision_at_k(ranked, set(range(10))) == 1.0
    assert precision_at_k(ranked, {42}) == 0.0
    assert precision_at_k(ranked, {0, 4, 9}) == pytest.approx(0.3)


def test_ndcg_examples():
    assert ndcg_at_k([5, 1, 2], {5}) == 1.0
    assert ndcg_at_k([1, 5, 2], {5}) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert ndcg_at_k(list(range(20)), {15}) == 0.0
    assert ndcg_at_k([1, 2], set()) == 0.0


@settings(max_examples=40)
@given(st.permutations(list(range(12))), st.sets(st.integers(0, 11), min_size=1, max_size=5))
def test_metrics_in_unit_interval(ranked, relevant):
    for metric in (precision_at_k, ndcg_at_k):
        assert 0.0 <= metric(ranked, relevant) <= 1.0


def test_rank_ties_by_id():
    np.testing.assert_array_equal(rank_items(np.array([9, 3, 5]), np.array([1.0, 1.0, 2.0])), [5, 3, 9])


def _balanced_set(n_users=100, n_neg=99, seed=0):
    rng = np.random.default_rng(seed)
    users = tuple(EvalUser(u, (int(rng.integers(0, 1000)),), tuple(range(1000, 1000 + n_neg))) for u in range(n_users))
    return EvalSet(users, 1100)


def test_random_scorer_auc_half():
    record = evaluate(random_scorer(3), _balanced_set())
    # 100 users x 99 pairs; std of the mean ~ 0.029 / sqrt(100)
    assert abs(record.auc - 0.5) < 0.02


def test_oracle_scorer():
    es = _balanced_set(20)
    record = evaluate(oracle_scorer(es), es)
    assert record.auc == 1.0
    assert record.p10 == pytest.approx(0.1)
    assert record.ndcg10 == 1.0


def test_evaluate_empty():
    with pytest.raises(DataError):
        evaluate(random_scorer(), EvalSet((), 0))


def test_metrics_table_format():
    stats = summarize([MetricRecord(0.78, 0.1, 0.3, 5), MetricRecord(0.80, 0.12, 0.32, 5)])
    text = format_metrics_table({"split-dssm": stats})
    assert "79.00±1.41" in text
    assert text.splitlines()[0].split() == ["Model", "AUC", "Precision@10", "nDCG@10"]
