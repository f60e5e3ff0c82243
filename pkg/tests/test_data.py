import subprocess

import numpy as np
import pytest

from splitrec.data import (
    Catalog,
    Client,
    Dataset,
    Interaction,
    InteractionStore,
    SyntheticSpec,
    gen_synthetic,
    load_movielens,
    n_negatives_for,
    train_test_split,
    user_text,
)
from splitrec.errors import DataError
from splitrec.featurize import TrigramVocab, encode


def test_movielens_toy(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_text("1::10::5::100\n1::20::4::101\n1::30::3::102\n")
    data = load_movielens(path, min_interactions=1)
    assert len(data.clients) == 1
    assert len(data.clients[0].interactions.positives()) == 3
    assert len(data.catalog) == 3


def test_movielens_parse_error(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_text("1::10::abc::0\n")
    with pytest.raises(DataError, match=r":1:"):
        load_movielens(path, min_interactions=1)


def test_movielens_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_movielens(tmp_path / "nope.dat")


def test_movielens_counts_match_line_count_script(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for user in range(1, 41):
        for movie in rng.choice(np.arange(1, 301), rng.integers(5, 60), replace=False):
            lines.append(f"{user}::{movie}::{rng.integers(1, 6)}::{rng.integers(10**6)}")
    path = tmp_path / "ratings.dat"
    path.write_text("\n".join(lines) + "\n")
    (tmp_path / "movies.dat").write_text("\n".join(f"{m}::Movie {m} (1999)::Drama|Comedy" for m in range(1, 301)) + "\n")
    script = (
        "cut -d: -f1 {p} | sort | uniq -c | awk '$1 >= 20' | wc -l; "
        "cut -d: -f3 {p} | sort -u | wc -l"
    ).format(p=path)
    users, items = (int(x) for x in subprocess.run(["sh", "-c", script], capture_output=True, text=True, check=True).stdout.split())
    data = load_movielens(path, min_interactions=20)
    assert len(data.clients) == users
    assert len(data.catalog) == items
    assert all(t[1] == "Drama Comedy" for t in data.catalog.texts)


def test_movielens_is_deterministic(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_text("".join(f"{u}::{m}::4::{u * m}\n" for u in range(1, 4) for m in range(1, 25)))
    a, b = load_movielens(path), load_movielens(path)
    assert [c.interactions.records for c in a.clients] == [c.interactions.records for c in b.clients]


def test_synthetic_noise_zero_within_cluster():
    data = gen_synthetic(SyntheticSpec(n_users=30, n_items=40, noise=0.0))
    for c in data.clients:
        for item in c.interactions.positives():
            assert data.item_cluster[item] == data.user_cluster[c.cid]


def test_synthetic_noise_half_is_cluster_independent():
    data = gen_synthetic(SyntheticSpec(n_users=200, n_items=200, noise=0.5))
    same = other = n_same = n_other = 0
    for c in data.clients:
        mask = data.item_cluster == data.user_cluster[c.cid]
        pos = np.zeros(200, bool)
        pos[list(c.interactions.positives())] = True
        same += pos[mask].sum()
        n_same += mask.sum()
        other += pos[~mask].sum()
        n_other += (~mask).sum()
    assert abs(same / n_same - other / n_other) < 0.02


def test_synthetic_clusters_separable_by_text():
    data = gen_synthetic(SyntheticSpec(), TrigramVocab(30000))
    feats = np.vstack([encode(t, data.catalog.vocab).to_dense() for t in data.catalog.texts])
    train, test = np.arange(0, 200, 2), np.arange(1, 200, 2)
    centroids = np.vstack([feats[train][data.item_cluster[train] == c].mean(axis=0) for c in range(2)])
    dists = ((feats[test][:, None, :] - centroids[None]) ** 2).sum(-1)
    accuracy = np.mean(dists.argmin(1) == data.item_cluster[test])
    assert accuracy >= 0.95


def test_synthetic_deterministic():
    a = gen_synthetic(SyntheticSpec(n_users=10, n_items=10, seed=4))
    b = gen_synthetic(SyntheticSpec(n_users=10, n_items=10, seed=4))
    assert a.catalog.texts == b.catalog.texts
    assert [c.interactions.records for c in a.clients] == [c.interactions.records for c in b.clients]


def _toy_dataset():
    catalog = Catalog([("a",), ("b",), ("c",), ("d",), ("e",)], TrigramVocab(64))
    recs = (Interaction(0, 1, 1.0), Interaction(1, 1, 2.0), Interaction(2, 1, 3.0))
    return Dataset([Client(0, InteractionStore(recs))], catalog)


def test_leave_last_out():
    train, ev = train_test_split(_toy_dataset(), n_negatives=5)
    assert train.clients[0].interactions.positives() == frozenset({0, 1})
    assert ev.users[0].positives == (2,)
    assert set(ev.users[0].negatives) == {3, 4}


def test_split_deterministic_and_disjoint():
    data = gen_synthetic(SyntheticSpec(n_users=50, n_items=60))
    t1, e1 = train_test_split(data, seed=3)
    t2, e2 = train_test_split(data, seed=3)
    assert e1 == e2
    by_cid = {c.cid: c for c in t1.clients}
    for user in e1.users:
        client = by_cid[user.cid]
        assert not set(user.positives) & client.interactions.positives()
        assert not set(user.negatives) & {r.item for r in data.clients[client.cid].interactions.records}


def test_n_negatives_for():
    assert n_negatives_for(0.9, 10) == 9
    assert n_negatives_for(0.0, 10) == 0
    assert n_negatives_for(0.7, 10) == 7
    assert n_negatives_for(0.55, 10) == 6


def test_user_text_sources():
    data = _toy_dataset()
    client = data.clients[0]
    assert user_text(client, data.catalog, "clicked_titles") == ("a", "b", "c")
    assert user_text(client, data.catalog, "auto") == ("a", "b", "c")
    withprofile = Client(0, client.interactions, ("likes jazz",))
    assert user_text(withprofile, data.catalog, "auto") == ("likes jazz",)
