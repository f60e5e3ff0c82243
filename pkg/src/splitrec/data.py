"""Datasets: per-client interaction stores, item catalogs, loaders and splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .featurize import FeatureVector, TrigramVocab, encode, encode_words
from .numeric import Rng


@dataclass(frozen=True)
class Interaction:
    item: int
    label: int = 1
    timestamp: float | None = None


@dataclass(frozen=True)
class InteractionStore:
    """A client's private (item, label[, timestamp]) records."""

    records: tuple[Interaction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if r.label not in (0, 1):
                raise DataError(f"label must be 0 or 1, got {r.label}")

    def positives(self) -> frozenset[int]:
        return frozenset(r.item for r in self.records if r.label == 1)

    def chronological(self) -> list[Interaction]:
        if all(r.timestamp is not None for r in self.records):
            return sorted(self.records, key=lambda r: (r.timestamp, r.item))
        return list(self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Catalog:
    """Items with dense ids ``0..M-1``: raw text fields and trigram features."""

    texts: list[tuple[str, ...]]
    vocab: TrigramVocab
    max_words: int | None = 64
    features: list[FeatureVector] = field(default_factory=list)
    raw_bytes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _sequences: dict[int, list[FeatureVector]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.texts = [tuple(t) for t in self.texts]
        if not self.features:
            self.features = [encode(t, self.vocab) for t in self.texts]
        self.raw_bytes = np.array([sum(len(f.encode("utf-8")) for f in t) for t in self.texts], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def dim(self) -> int:
        return self.vocab.dim

    def check_ids(self, ids: Sequence[int]) -> None:
        bad = [int(i) for i in ids if not 0 <= int(i) < len(self)]
        if bad:
            raise DataError(f"unknown item ids {bad}")

    def dense(self, ids: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(ids), self.dim))
        for row, i in enumerate(ids):
            fv = self.features[int(i)]
            out[row, fv.indices] = fv.values
        return out

    def sequence(self, item: int) -> list[FeatureVector]:
        seq = self._sequences.get(item)
        if seq is None:
            seq = encode_words(self.texts[item], self.vocab, self.max_words)
            self._sequences[item] = seq
        return seq

    def title(self, item: int) -> str:
        return self.texts[item][0] if self.texts[item] else ""


@dataclass(frozen=True)
class Client:
    cid: int
    interactions: InteractionStore
    profile: tuple[str, ...] = ()


@dataclass
class Dataset:
    clients: list[Client]
    catalog: Catalog
    name: str = "dataset"
    user_cluster: np.ndarray | None = None
    item_cluster: np.ndarray | None = None

    def client(self, cid: int) -> Client:
        return self.clients[cid]


def user_text(client: Client, catalog: Catalog, source: str = "auto", n_titles: int = 5) -> tuple[str, ...]:
    """Text fields that make up a user's feature vector.

    ``"profile"`` uses the client's own profile fields; ``"clicked_titles"``
    concatenates the titles of the first ``n_titles`` clicked items;
    ``"auto"`` picks the profile when the client has one.
    """
    if source == "auto":
        source = "profile" if any(client.profile) else "clicked_titles"
    if source == "profile":
        return client.profile
    if source == "clicked_titles":
        clicked = [r.item for r in client.interactions.chronological() if r.label == 1]
        return tuple(catalog.title(i) for i in clicked[:n_titles])
    raise ValueError(f"unknown user feature source {source!r}")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


@dataclass(frozen=True)
class SyntheticSpec:
    """Latent-cluster click model with cluster-salted item and user texts.

    A user clicks an item of its own cluster with probability ``1 - noise``
    and any other item with probability ``noise``. Each text token comes from
    the owner's cluster vocabulary with probability ``text_salt``, otherwise
    from a shared vocabulary.
    """

    n_users: int = 200
    n_items: int = 200
    n_clusters: int = 2
    noise: float = 0.05
    seed: int = 0
    title_tokens: int = 8
    body_tokens: int = 0
    profile_tokens: int = 8
    text_salt: float = 0.8
    words_per_cluster: int = 40

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_users < 1 or self.n_items < 1:
            raise ValueError("synthetic data needs at least one user, item and cluster")
        if not 0 <= self.noise <= 1 or not 0 <= self.text_salt <= 1:
            raise ValueError("noise and text_salt must lie in [0, 1]")


def _word_pool(rng: Rng, n: int) -> list[str]:
    lengths = rng.integers(4, 9, n)
    return ["".join(rng.choice(_LETTERS, int(length), replace=True)) for length in lengths]


def _salted_text(rng: Rng, n_tokens: int, own: list[str], shared: list[str], salt: float) -> str:
    if n_tokens <= 0:
        return ""
    from_own = rng.random(n_tokens) < salt
    own_pick = rng.integers(0, len(own), n_tokens)
    shared_pick = rng.integers(0, len(shared), n_tokens)
    return " ".join(own[o] if f else shared[s] for f, o, s in zip(from_own, own_pick, shared_pick))


def gen_synthetic(spec: SyntheticSpec, vocab: TrigramVocab | None = None) -> Dataset:
    """Generate a seeded clustered dataset; ground truth is in ``user_cluster``/``item_cluster``."""
    vocab = vocab or TrigramVocab()
    root = Rng(spec.seed)
    pools = [_word_pool(root.child(1, c), spec.words_per_cluster) for c in range(spec.n_clusters)]
    shared = _word_pool(root.child(2), spec.words_per_cluster)
    item_cluster = root.child(3).integers(0, spec.n_clusters, spec.n_items)
    user_cluster = root.child(4).integers(0, spec.n_clusters, spec.n_users)

    texts = []
    for j in range(spec.n_items):
        r = root.child(5, j)
        own = pools[item_cluster[j]]
        title = _salted_text(r, spec.title_tokens, own, shared, spec.text_salt)
        fields = (title,)
        if spec.body_tokens:
            fields += (_salted_text(r, spec.body_tokens, own, shared, spec.text_salt),)
        texts.append(fields)
    catalog = Catalog(texts, vocab)

    clients = []
    for u in range(spec.n_users):
        r = root.child(6, u)
        same = item_cluster == user_cluster[u]
        p = np.where(same, 1.0 - spec.noise, spec.noise)
        clicked = np.flatnonzero(r.random(spec.n_items) < p)
        order = r.permutation(clicked.size)
        records = tuple(Interaction(int(clicked[k]), 1, float(t)) for t, k in enumerate(order))
        profile = (_salted_text(r, spec.profile_tokens, pools[user_cluster[u]], shared, spec.text_salt),)
        clients.append(Client(u, InteractionStore(records), profile))
    return Dataset(clients, catalog, "synthetic", user_cluster, item_cluster)


def dump_dataset_json(dataset: Dataset, path: str | Path, spec: SyntheticSpec | None = None) -> None:
    payload = {
        "name": dataset.name,
        "spec": asdict(spec) if spec is not None else None,
        "vocab_dim": dataset.catalog.dim,
        "items": [list(t) for t in dataset.catalog.texts],
        "raw_bytes": dataset.catalog.raw_bytes.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


# ---------------------------------------------------------------------------
# MovieLens
# ---------------------------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        return raw.decode("latin-1").splitlines()


def load_movielens(
    ratings_path: str | Path,
    *,
    movies_path: str | Path | None = None,
    vocab: TrigramVocab | None = None,
    min_interactions: int = 20,
) -> Dataset:
    """Load ``UserID::MovieID::Rating::Timestamp`` ratings.

    Ratings >= 1 become positive interactions. Item text is
    ``title + genres`` from ``movies.dat`` (looked up next to the ratings file
    when ``movies_path`` is None); without it, items are named by their id.
    Users with fewer than ``min_interactions`` positives are dropped.
    """
    ratings_path = Path(ratings_path)
    if not ratings_path.exists():
        raise DataError(f"ratings file not found: {ratings_path}")
    rows = []
    for lineno, line in enumerate(_read_lines(ratings_path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise DataError(f"{ratings_path}:{lineno}: expected 4 '::'-separated fields, got {len(parts)}")
        try:
            user, movie, rating, ts = int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise DataError(f"{ratings_path}:{lineno}: {exc}") from None
        rows.append((user, movie, rating, ts))
    if not rows:
        raise DataError(f"{ratings_path}: no ratings")

    movies: dict[int, tuple[str, ...]] = {}
    movies_path = Path(movies_path) if movies_path is not None else ratings_path.with_name("movies.dat")
    if movies_path.exists():
        for lineno, line in enumerate(_read_lines(movies_path), start=1):
            if not line.strip():
                continue
            parts = line.split("::")
            if len(parts) != 3:
                raise DataError(f"{movies_path}:{lineno}: expected MovieID::Title::Genres")
            movies[int(parts[0])] = (parts[1], parts[2].replace("|", " "))

    movie_ids = sorted({m for _, m, _, _ in rows})
    dense_id = {m: i for i, m in enumerate(movie_ids)}
    texts = [movies.get(m, (f"movie {m}",)) for m in movie_ids]

    per_user: dict[int, list[Interaction]] = {}
    for user, movie, rating, ts in rows:
        per_user.setdefault(user, []).append(Interaction(dense_id[movie], int(rating >= 1), ts))
    clients = []
    for user in sorted(per_user):
        store = InteractionStore(tuple(per_user[user]))
        if len(store.positives()) >= min_interactions:
            clients.append(Client(len(clients), store))
    if not clients:
        raise DataError(f"{ratings_path}: no user has >= {min_interactions} positive interactions")
    catalog = Catalog(texts, vocab or TrigramVocab())
    return Dataset(clients, catalog, "movielens")


# ---------------------------------------------------------------------------
# Train / eval split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalUser:
    cid: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


@dataclass(frozen=True)
class EvalSet:
    users: tuple[EvalUser, ...]
    n_items: int

    def __len__(self) -> int:
        return len(self.users)


def train_test_split(dataset: Dataset, seed: int = 0, n_negatives: int = 99) -> tuple[Dataset, EvalSet]:
    """Leave-last-out per user, with ``n_negatives`` sampled non-clicked items per held-out positive.

    The held-out item is the latest by timestamp, or a random one when
    timestamps are missing. Users with a single positive stay in training
    but are not evaluated.
    """
    root = Rng(seed, (7,))
    n_items = len(dataset.catalog)
    train_clients, eval_users = [], []
    for client in dataset.clients:
        rng = root.child(client.cid)
        positives = client.interactions.positives()
        records = client.interactions.records
        if len(positives) < 2:
            train_clients.append(client)
            continue
        if all(r.timestamp is not None for r in records):
            pos_records = [r for r in records if r.label == 1]
            held = max(pos_records, key=lambda r: (r.timestamp, r.item)).item
        else:
            held = int(rng.choice(sorted(positives), 1)[0])
        kept = tuple(r for r in records if r.item != held)
        train_clients.append(Client(client.cid, InteractionStore(kept), client.profile))
        seen = np.array(sorted({r.item for r in records}))
        pool = np.setdiff1d(np.arange(n_items), seen)
        k = min(n_negatives, pool.size)
        negatives = tuple(int(i) for i in rng.choice(pool, k)) if k else ()
        eval_users.append(EvalUser(client.cid, (held,), negatives))
    train = Dataset(train_clients, dataset.catalog, dataset.name, dataset.user_cluster, dataset.item_cluster)
    return train, EvalSet(tuple(eval_users), n_items)


def n_negatives_for(rho: float, batch_size: int) -> int:
    """Negatives in a request of ``batch_size`` items at negative rate ``rho``."""
    return int(math.ceil(round(rho * batch_size, 9)))
