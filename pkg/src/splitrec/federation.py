"""Round orchestration across the recommendation server, aggregation server and clients.

Split mode (one round ``t``):

1. the aggregation server broadcasts the user tower to the selected clients;
2. each client sends an obfuscated request (clicked + non-clicked item ids,
   shuffled) and the recommendation server answers with item embeddings,
   caching its item-tower activations;
3. each client trains locally on its batch and produces the user-tower
   gradient, its loss and the cut-layer gradients for its items;
4. those payloads are masked and mixed around the client ring and the
   aggregation server averages the mixed uploads;
5. the aggregation server applies FedAdam to the user tower;
6. the averaged loss and cut-layer block go to the recommendation server,
   which backpropagates through its cached activations and applies FedAdam
   to the item tower.

Naive mode runs both towers on the clients instead. All randomness is keyed
by ``(seed, purpose, round, client/item)``, so both modes see identical
client selections, requests and dropout masks.
"""

from __future__ import annotations

import logging
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import accounting as acct
from .accounting import AGG_SERVER, FRAMING, REC_SERVER, CostLedger, Phase, client_entity
from .data import Catalog, Dataset, EvalSet, n_negatives_for, user_text
from .errors import ConfigError, DataError, PrivacyViolation, PrivacyWarning, RoundAborted, SplitRecError
from .evaluation import evaluate
from .featurize import encode, encode_words, stack_dense
from .numeric import Rng, count_ops
from .optimizer import AdamState, FedAdamConfig, FedAdamState, adam_step, fedadam_step
from .secure_agg import (
    KIND_MIXED,
    KIND_SHARE,
    GradPayload,
    aggregate,
    decode_message,
    encode_message,
    mix_local,
    ring_pass,
    ring_successor,
    split_shares,
)
from .towers import (
    Arch,
    TowerParams,
    cosine_scores,
    dropout_masks,
    head_forward_backward,
    init_tower,
    item_backward,
    item_forward_cached,
    serialize_tower,
    tower_backward,
    tower_forward,
)

log = logging.getLogger(__name__)

# rng purposes
_INIT, _SELECT, _REQUEST, _MASK, _DROP_USER, _DROP_ITEM = range(6)

MODES = ("split", "naive", "centralized")


@dataclass(frozen=True)
class FederationConfig:
    arch: str = "dssm"
    widths: tuple[int, ...] | None = None
    window: int = 3
    K: int = 50
    T: int = 10
    rho: float = 0.9
    seed: int = 0
    dropout: float = 0.2
    deterministic: bool = False
    init_std: float = 0.1
    mask_bound: float = 1e3
    cut_layout: str = "union"
    item_grad_norm: str = "clients"
    user_feature_source: str = "auto"
    max_words: int = 64
    optimizer: FedAdamConfig = FedAdamConfig()
    workers: int = 1
    max_retries: int = 3

    @property
    def dropout_rate(self) -> float:
        return 0.0 if self.deterministic else self.dropout

    @property
    def n_negatives(self) -> int:
        return n_negatives_for(self.rho, self.T)

    def validate(self) -> None:
        problems = []
        if self.arch not in ("dssm", "clsm"):
            problems.append(f"arch must be dssm or clsm, got {self.arch!r}")
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.T < 1:
            problems.append("T must be >= 1")
        if not 0 <= self.rho <= 1:
            problems.append("rho must lie in [0, 1]")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must lie in [0, 1)")
        if self.mask_bound < 0:
            problems.append("mask_bound must be >= 0")
        if self.cut_layout not in ("union", "catalog"):
            problems.append("cut_layout must be union or catalog")
        if self.item_grad_norm not in ("clients", "requests"):
            problems.append("item_grad_norm must be clients or requests")
        if self.user_feature_source not in ("auto", "profile", "clicked_titles"):
            problems.append("user_feature_source must be auto, profile or clicked_titles")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundPlan:
    """Server-visible plan: selected clients and their shuffled item requests."""

    round: int
    selected: tuple[int, ...]
    requests: dict[int, tuple[int, ...]]

    def union(self) -> np.ndarray:
        return np.unique(np.concatenate([np.asarray(r, dtype=np.int64) for r in self.requests.values()]))


@dataclass
class ClientState:
    """What lives on one device. Features and labels never leave it."""

    cid: int
    features: np.ndarray
    positives: frozenset[int]
    non_clicked: np.ndarray
    user_params: TowerParams | None = None
    user_embedding: np.ndarray | None = None

    def labels_for(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([1.0 if int(i) in self.positives else 0.0 for i in ids])

    def refresh_embedding(self, user_params: TowerParams) -> np.ndarray:
        self.user_params = user_params
        emb, _ = tower_forward(user_params, _as_tower_input(user_params, self.features))
        self.user_embedding = emb[0]
        return self.user_embedding


@dataclass
class ServerState:
    """Recommendation server: item tower, catalog, per-round activation cache."""

    item_params: TowerParams
    catalog: Catalog
    opt: FedAdamState
    cache: dict = field(default_factory=dict)


@dataclass
class AggServerState:
    """Secure aggregation server: user tower and its optimizer."""

    user_params: TowerParams
    opt: FedAdamState


@dataclass
class RoundReport:
    round: int
    mode: str
    avg_loss: float
    selected: tuple[int, ...]
    bytes: dict[str, dict[str, int]]
    ops: dict[str, int]
    compute_ms: dict[str, float]
    attempt: int = 0
    eval: dict | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out["selected"] = list(self.selected)
        return out


def _as_tower_input(params: TowerParams, features: np.ndarray):
    return [features] if params.arch is Arch.CLSM else features


# ---------------------------------------------------------------------------
# Stateless protocol pieces
# ---------------------------------------------------------------------------


def select_clients(pool: Sequence[int], K: int, rng: Rng) -> list[int]:
    """Uniform sample of ``K`` distinct client ids."""
    if K > len(pool):
        raise ConfigError(f"K={K} exceeds pool size {len(pool)}")
    if K < 1:
        raise ConfigError("K must be >= 1")
    return [int(c) for c in rng.choice(np.asarray(pool), K, replace=False)]


def build_obfuscated_request(client: ClientState, T: int, rho: float, rng: Rng) -> tuple[int, ...]:
    """``ceil(rho T)`` non-clicked plus ``T - ceil(rho T)`` clicked item ids, shuffled."""
    n_neg = n_negatives_for(rho, T)
    n_pos = T - n_neg
    positives = np.array(sorted(client.positives), dtype=np.int64)
    if positives.size < n_pos or client.non_clicked.size < n_neg:
        raise DataError(
            f"client {client.cid} cannot fill a request: needs {n_pos} clicked / {n_neg} non-clicked, "
            f"has {positives.size} / {client.non_clicked.size}"
        )
    pos = rng.choice(positives, n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    neg = rng.choice(client.non_clicked, n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    return tuple(int(i) for i in rng.permutation(np.concatenate([pos, neg])))


def online_infer(client: ClientState, item_ids: Sequence[int], item_embeddings: np.ndarray, topk: int) -> list[int]:
    """Rank items by cosine similarity to the client's cached embedding.

    Ties go to the smaller item id; ``topk`` beyond the catalog returns everything.
    """
    if client.user_embedding is None:
        raise SplitRecError(f"client {client.cid} has no cached user embedding")
    ids = np.asarray(item_ids, dtype=np.int64)
    scores = cosine_scores(client.user_embedding, item_embeddings)
    order = np.lexsort((ids, -scores))
    return [int(i) for i in ids[order][:topk]]


# ---------------------------------------------------------------------------
# Wire formats for the non-share messages
# ---------------------------------------------------------------------------

_REQ = struct.Struct("<4sII")
_EMB = struct.Struct("<4sIII")
_RAW = struct.Struct("<4sII")


def encode_request(round: int, ids: Sequence[int]) -> bytes:
    return _REQ.pack(b"REQ1", round, len(ids)) + np.asarray(ids, dtype="<i8").tobytes()


def decode_request(blob: bytes) -> tuple[int, tuple[int, ...]]:
    magic, rnd, n = _REQ.unpack_from(blob, 0)
    if magic != b"REQ1" or len(blob) != _REQ.size + 8 * n:
        raise DataError("malformed item request")
    return rnd, tuple(int(i) for i in np.frombuffer(blob, dtype="<i8", offset=_REQ.size))


def encode_embeddings(round: int, ids: Sequence[int], emb: np.ndarray) -> bytes:
    emb = np.atleast_2d(emb)
    head = _EMB.pack(b"EMB1", round, len(ids), emb.shape[1])
    return head + np.asarray(ids, dtype="<i8").tobytes() + emb.astype("<f8").tobytes()


def encode_raw_items(round: int, ids: Sequence[int], catalog: Catalog) -> bytes:
    parts = [_RAW.pack(b"RAW1", round, len(ids)), np.asarray(ids, dtype="<i8").tobytes()]
    for i in ids:
        fields = catalog.texts[int(i)]
        parts.append(struct.pack("<H", len(fields)))
        for f in fields:
            b = f.encode("utf-8")
            parts.append(struct.pack("<I", len(b)))
            parts.append(b)
    return b"".join(parts)


# ---------------------------------------------------------------------------
# Traffic inspection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    blob: bytes
    phase: Phase = Phase.TRAINING


class TrafficInspector:
    """Keeps every serialized message so tests can audit what clients reveal."""

    def __init__(self) -> None:
        self.messages: list[Message] = []

    def observe(self, msg: Message) -> None:
        self.messages.append(msg)

    def client_messages(self) -> list[Message]:
        return [m for m in self.messages if acct.is_client(m.sender)]

    def requests(self) -> list[tuple[int, str, tuple[int, ...]]]:
        out = []
        for m in self.client_messages():
            if m.kind == "request":
                rnd, ids = decode_request(m.blob)
                out.append((rnd, m.sender, ids))
        return out

    def check(self, clients: dict[int, ClientState], T: int, n_negatives: int) -> int:
        """Audit all client traffic; raises :class:`PrivacyViolation`. Returns messages checked.

        Requests must be exactly ``T`` ids with ``n_negatives`` non-clicked;
        share messages must not contain the client's non-zero feature values
        or its label vector as float64 bit patterns.
        """
        checked = 0
        for m in self.client_messages():
            cid = int(m.sender.split(":")[1])
            client = clients[cid]
            if m.kind == "request":
                _, ids = decode_request(m.blob)
                if len(ids) != T:
                    raise PrivacyViolation(f"{m.sender} request has {len(ids)} ids")
                negs = sum(1 for i in ids if i not in client.positives)
                if negs != n_negatives:
                    raise PrivacyViolation(f"{m.sender} request has {negs} negatives, expected {n_negatives}")
            elif m.kind in ("ring_share", "mixed_upload"):
                msg = decode_message(m.blob)
                floats = m.blob[msg["float_offset"] :]
                values = np.unique(client.features[client.features != 0])
                for v in values:
                    needle = struct.pack("<d", float(v))
                    for pos in _find_all(floats, needle):
                        if pos % 8 == 0:
                            raise PrivacyViolation(f"{m.sender} {m.kind} carries feature value {v}")
            else:
                raise PrivacyViolation(f"{m.sender} sent unexpected message kind {m.kind!r}")
            checked += 1
        return checked

    def labels_leaked(self, clients: dict[int, ClientState], plans: dict[int, RoundPlan]) -> bool:
        """True if any share message contains a client's label vector verbatim."""
        for m in self.client_messages():
            if m.kind not in ("ring_share", "mixed_upload"):
                continue
            cid = int(m.sender.split(":")[1])
            ids = plans[m.round].requests.get(cid)
            if ids is None:
                continue
            pattern = clients[cid].labels_for(ids).astype("<f8").tobytes()
            body = m.blob[decode_message(m.blob)["float_offset"] :]
            if any(p % 8 == 0 for p in _find_all(body, pattern)):
                return True
        return False


def _find_all(haystack: bytes, needle: bytes):
    start = haystack.find(needle)
    while start != -1:
        yield start
        start = haystack.find(needle, start + 1)


# ---------------------------------------------------------------------------
# Orchestrator
# ---------------------------------------------------------------------------


class _Stage:
    """Ledger and message buffer for one round; merged only when the round commits."""

    def __init__(self) -> None:
        self.ledger = CostLedger()
        self.messages: list[Message] = []
        self.ms: dict[str, float] = {}

    def send(self, t: int, src: str, dst: str, kind: str, blob: bytes, channels: dict[str, int], phase=Phase.TRAINING):
        framing = len(blob) - sum(channels.values())
        if framing < 0:
            raise SplitRecError(f"{kind}: channel sizes exceed message size")
        self.ledger.transfer(t, src, dst, {**channels, FRAMING: framing}, phase)
        self.messages.append(Message(t, src, dst, kind, blob, phase))

    def compute(self, t: int, entity: str, ops: int, channel: str, ms: float = 0.0, phase=Phase.TRAINING):
        self.ledger.compute(t, entity, ops, phase, channel)
        self.ms[entity] = self.ms.get(entity, 0.0) + ms


class Federation:
    """Simulates the three roles over a dataset.

    Args:
        dataset: training dataset (clients + catalog).
        config: federation hyperparameters.
        ledger: cost ledger to append to (a fresh one by default).
        inspector: optional traffic inspector receiving every message.
    """

    def __init__(
        self,
        dataset: Dataset,
        config: FederationConfig = FederationConfig(),
        ledger: CostLedger | None = None,
        inspector: TrafficInspector | None = None,
    ):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.catalog = dataset.catalog
        self.ledger = ledger if ledger is not None else CostLedger()
        self.inspector = inspector
        self.root = Rng(config.seed)
        self.faults: set[tuple[int, int]] = set()
        self.plans: dict[int, RoundPlan] = {}
        self.round = 0
        self._centralized: dict[str, AdamState] | None = None
        self.initialize()

    # -- initialization -----------------------------------------------------

    def initialize(self) -> None:
        cfg = self.config
        arch = Arch(cfg.arch)
        dim = self.catalog.dim
        if self.catalog.max_words != cfg.max_words:
            self.catalog.max_words = cfg.max_words
            self.catalog._sequences.clear()
        user = init_tower(self.root.child(_INIT, 0), arch, dim, cfg.widths, std=cfg.init_std, window=cfg.window)
        item = init_tower(self.root.child(_INIT, 1), arch, dim, cfg.widths, std=cfg.init_std, window=cfg.window)
        self.server = ServerState(item, self.catalog, FedAdamState.zeros(item.n_params, cfg.optimizer))
        self.agg = AggServerState(user, FedAdamState.zeros(user.n_params, cfg.optimizer))

        n_neg, n_pos = cfg.n_negatives, cfg.T - cfg.n_negatives
        all_items = np.arange(len(self.catalog))
        self.clients: dict[int, ClientState] = {}
        skipped = 0
        for client in self.dataset.clients:
            positives = client.interactions.positives()
            non_clicked = np.setdiff1d(all_items, np.fromiter(positives, dtype=np.int64, count=len(positives)))
            if len(positives) < max(n_pos, 1) or non_clicked.size < n_neg:
                skipped += 1
                continue
            text = user_text(client, self.catalog, cfg.user_feature_source)
            if arch is Arch.CLSM:
                feats = stack_dense(encode_words(text, self.catalog.vocab, cfg.max_words), dim)
            else:
                feats = encode(text, self.catalog.vocab).to_dense()
            self.clients[client.cid] = ClientState(client.cid, feats, positives, non_clicked)
        if skipped:
            log.info("%d clients lack enough clicked/non-clicked items and are not in the pool", skipped)
        self.pool = sorted(self.clients)
        if cfg.K > len(self.pool):
            raise ConfigError(f"K={cfg.K} exceeds pool size {len(self.pool)}")
        self.round = 0

    # -- plans ---------------------------------------------------------------

    def plan_round(self, t: int, attempt: int = 0) -> RoundPlan:
        cfg = self.config
        selected = select_clients(self.pool, cfg.K, self.root.child(_SELECT, t, attempt))
        requests = {
            cid: build_obfuscated_request(self.clients[cid], cfg.T, cfg.rho, self.root.child(_REQUEST, t, cid, attempt))
            for cid in selected
        }
        return RoundPlan(t, tuple(selected), requests)

    def _item_masks(self, t: int, ids: Sequence[int], params: TowerParams):
        rate = self.config.dropout_rate
        if rate <= 0:
            return None
        rows = [dropout_masks(params, 1, rate, self.root.child(_DROP_ITEM, t, int(i))) for i in ids]
        return [None if rows[0][li] is None else np.vstack([r[li] for r in rows]) for li in range(len(params.layers))]

    def _user_masks(self, t: int, cid: int, params: TowerParams):
        rate = self.config.dropout_rate
        if rate <= 0:
            return None
        return dropout_masks(params, 1, rate, self.root.child(_DROP_USER, t, cid))

    def _item_inputs(self, ids: Sequence[int]):
        if self.server.item_params.arch is Arch.CLSM:
            return [self.catalog.sequence(int(i)) for i in ids]
        return self.catalog.dense(ids)

    def _cut_slots(self, plan: RoundPlan) -> np.ndarray:
        if self.config.cut_layout == "catalog":
            return np.arange(len(self.catalog))
        return plan.union()

    # -- client local work ----------------------------------------------------

    def _local_train(self, t, cid, ids, embeddings, user_params, item_params=None, item_masks_all=None):
        """Local training on each selected client, plus the naive item pass. Returns grads, cut grads, loss, ops, ms."""
        if (t, cid) in self.faults:
            raise RoundAborted(t, f"client {cid} failed during local training")
        client = self.clients[cid]
        labels = client.labels_for(ids)
        start = time.perf_counter()
        with count_ops() as ops:
            item_trace = None
            if item_params is not None:
                embeddings, item_trace = tower_forward(item_params, self._item_inputs(ids), item_masks_all)
            emb, trace = tower_forward(user_params, _as_tower_input(user_params, client.features), self._user_masks(t, cid, user_params))
            loss, _, grad_u, cut = head_forward_backward(emb[0], embeddings, labels)
            grad_user = tower_backward(user_params, trace, grad_u[None, :])
            grad_item = tower_backward(item_params, item_trace, cut) if item_params is not None else None
        ms = 1e3 * (time.perf_counter() - start)
        return grad_user, grad_item, cut, loss, ops.ops, ms

    def _map_clients(self, fn, items):
        # deterministic mode keeps clients sequential in selection order
        if self.config.workers > 1 and not self.config.deterministic and len(items) > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    # -- secure aggregation ----------------------------------------------------

    def _ring(self, stage: _Stage, t: int, attempt: int, selected, payloads: dict[int, GradPayload], channel_of):
        """Mask, pass and mix payloads; upload to the aggregation server; aggregate there."""
        cfg = self.config
        bound = cfg.mask_bound
        if len(selected) == 1:
            warnings.warn(
                "secure aggregation with K=1 cannot mask the payload; the upload equals it",
                PrivacyWarning,
                stacklevel=3,
            )
            bound = 0.0
        shares1, shares2 = {}, {}
        for cid in selected:
            start = time.perf_counter()
            with count_ops() as ops:
                s1, s2 = split_shares(payloads[cid], self.root.child(_MASK, t, cid, attempt), bound, round=t, origin=cid)
            shares1[cid], shares2[cid] = s1, s2
            stage.compute(t, client_entity(cid), ops.ops, "secure_agg", 1e3 * (time.perf_counter() - start))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PrivacyWarning)
            deliveries = ring_pass(list(selected), [shares2[c] for c in selected])
        for cid in selected:
            succ = ring_successor(selected, cid)
            blob = encode_message(KIND_SHARE, shares2[cid])
            stage.send(t, client_entity(cid), client_entity(succ), "ring_share", blob, {"ring": 8 * (shares2[cid].grad.size + 1)})
        mixed = []
        for cid in selected:
            start = time.perf_counter()
            with count_ops() as ops:
                m = mix_local(shares1[cid], deliveries[cid])
            stage.compute(t, client_entity(cid), ops.ops, "secure_agg", 1e3 * (time.perf_counter() - start))
            blob = encode_message(KIND_MIXED, m)
            stage.send(t, client_entity(cid), AGG_SERVER, "mixed_upload", blob, channel_of(m))
            mixed.append(m)
        start = time.perf_counter()
        with count_ops() as ops:
            avg, avg_loss = aggregate(mixed)
        stage.compute(t, AGG_SERVER, ops.ops, "secure_agg", 1e3 * (time.perf_counter() - start))
        return avg, avg_loss

    # -- rounds -------------------------------------------------------------------

    def run_round(self, t: int | None = None, attempt: int = 0) -> RoundReport:
        """One split-mode round. Global state changes only if it completes."""
        t = self.round if t is None else t
        cfg = self.config
        stage = _Stage()
        plan = self.plan_round(t, attempt)
        selected = plan.selected
        user0, item0 = self.agg.user_params, self.server.item_params

        tower_blob = serialize_tower(user0)
        for cid in selected:
            stage.send(t, AGG_SERVER, client_entity(cid), "user_tower", tower_blob, {"user_tower": 8 * user0.n_params})
            stage.send(t, client_entity(cid), REC_SERVER, "request", encode_request(t, plan.requests[cid]), {"request": 8 * cfg.T})

        # serve embeddings for the union of requests
        union = plan.union()
        start = time.perf_counter()
        with count_ops() as ops:
            cache = item_forward_cached(item0, union, self._item_inputs(union), self._item_masks(t, union, item0))
        stage.compute(t, REC_SERVER, ops.ops, "model", 1e3 * (time.perf_counter() - start))
        served = {}
        for cid in selected:
            ids = plan.requests[cid]
            emb = cache.lookup(ids)
            served[cid] = emb
            stage.send(t, REC_SERVER, client_entity(cid), "item_embeddings", encode_embeddings(t, ids, emb), {"item_embeddings": 8 * emb.size})

        # local training
        results = self._map_clients(lambda cid: self._local_train(t, cid, plan.requests[cid], served[cid], user0), list(selected))

        slots = self._cut_slots(plan)
        slot_pos = {int(i): p for p, i in enumerate(slots)}
        k = item0.embedding_dim
        payloads = {}
        for cid, (grad_user, _, cut, loss, ops_n, ms) in zip(selected, results):
            stage.compute(t, client_entity(cid), ops_n, "model", ms)
            block = np.zeros((slots.size, k))
            presence = np.zeros(slots.size)
            for item, row in zip(plan.requests[cid], cut):
                block[slot_pos[item]] = row
                presence[slot_pos[item]] = 1.0
            sections = (("user_grad", user0.n_params), ("cut_grad", block.size), ("presence", presence.size))
            payloads[cid] = GradPayload(np.concatenate([grad_user.flat(), block.ravel(), presence]), loss, tuple(int(s) for s in slots), sections)

        def channels(m):
            return {"user_grad": 8 * user0.n_params, "cut_grad": 8 * slots.size * (k + 1), "loss": 8}

        avg, avg_loss = self._ring(stage, t, attempt, selected, payloads, channels)

        # user tower update at the aggregation server
        p_u = user0.n_params
        start = time.perf_counter()
        new_user, new_user_opt = fedadam_step(self.agg.opt, user0, avg[:p_u])
        stage.compute(t, AGG_SERVER, 0, "optimizer", 1e3 * (time.perf_counter() - start))

        # loss + cut block to the recommendation server, item tower update
        cut_avg = avg[p_u : p_u + slots.size * k].reshape(slots.size, k)
        presence_avg = avg[p_u + slots.size * k :]
        bp_blob = np.concatenate([[avg_loss], cut_avg.ravel(), presence_avg]).astype("<f8").tobytes()
        stage.send(t, AGG_SERVER, REC_SERVER, "bp_signal", bp_blob, {"bp_signal": len(bp_blob)})
        rows = np.array([slot_pos[int(i)] for i in union])
        cut_rows = cut_avg[rows]
        if cfg.item_grad_norm == "requests":
            counts = np.rint(presence_avg[rows] * len(selected))
            cut_rows = cut_rows * (len(selected) / np.maximum(counts, 1.0))[:, None]
        start = time.perf_counter()
        with count_ops() as ops:
            grad_item = item_backward((union, cut_rows), cache, item0)
        new_item, new_item_opt = fedadam_step(self.server.opt, item0, grad_item)
        stage.compute(t, REC_SERVER, ops.ops, "model", 1e3 * (time.perf_counter() - start))

        # commit
        self.agg = AggServerState(new_user, new_user_opt)
        self.server.item_params, self.server.opt = new_item, new_item_opt
        return self._commit(stage, plan, "split", avg_loss, attempt)

    def run_round_naive(self, t: int | None = None, attempt: int = 0) -> RoundReport:
        """One naive-baseline round: clients train both towers on raw item data."""
        t = self.round if t is None else t
        cfg = self.config
        stage = _Stage()
        plan = self.plan_round(t, attempt)
        selected = plan.selected
        user0, item0 = self.agg.user_params, self.server.item_params

        user_blob, item_blob = serialize_tower(user0), serialize_tower(item0)
        for cid in selected:
            ent = client_entity(cid)
            stage.send(t, AGG_SERVER, ent, "user_tower", user_blob, {"user_tower": 8 * user0.n_params})
            stage.send(t, AGG_SERVER, ent, "item_tower", item_blob, {"item_tower": 8 * item0.n_params})
            ids = plan.requests[cid]
            stage.send(t, ent, REC_SERVER, "request", encode_request(t, ids), {"request": 8 * cfg.T})
            raw = int(self.catalog.raw_bytes[list(ids)].sum())
            stage.send(t, REC_SERVER, ent, "raw_items", encode_raw_items(t, ids, self.catalog), {"raw_items": raw})

        def work(cid):
            ids = plan.requests[cid]
            return self._local_train(t, cid, ids, None, user0, item0, self._item_masks(t, ids, item0))

        results = self._map_clients(work, list(selected))
        p_u, p_v = user0.n_params, item0.n_params
        payloads = {}
        for cid, (grad_user, grad_item, _, loss, ops_n, ms) in zip(selected, results):
            stage.compute(t, client_entity(cid), ops_n, "model", ms)
            sections = (("user_grad", p_u), ("item_grad", p_v))
            payloads[cid] = GradPayload(np.concatenate([grad_user.flat(), grad_item.flat()]), loss, (), sections)

        def channels(m):
            return {"user_grad": 8 * p_u, "item_grad": 8 * p_v, "loss": 8}

        avg, avg_loss = self._ring(stage, t, attempt, selected, payloads, channels)
        new_user, new_user_opt = fedadam_step(self.agg.opt, user0, avg[:p_u])
        new_item, new_item_opt = fedadam_step(self.server.opt, item0, avg[p_u:])
        self.agg = AggServerState(new_user, new_user_opt)
        self.server.item_params, self.server.opt = new_item, new_item_opt
        return self._commit(stage, plan, "naive", avg_loss, attempt)

    def run_round_centralized(self, t: int | None = None, attempt: int = 0) -> RoundReport:
        """Single-party baseline: same batches, plaintext mean gradient, bias-corrected Adam."""
        t = self.round if t is None else t
        stage = _Stage()
        plan = self.plan_round(t, attempt)
        user0, item0 = self.agg.user_params, self.server.item_params
        if self._centralized is None:
            oc = self.config.optimizer
            kw = dict(lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.tau)
            self._centralized = {"user": AdamState.zeros(user0.n_params, **kw), "item": AdamState.zeros(item0.n_params, **kw)}
        gu = np.zeros(user0.n_params)
        gv = np.zeros(item0.n_params)
        losses = []
        for cid in plan.selected:
            ids = plan.requests[cid]
            grad_user, grad_item, _, loss, ops_n, ms = self._local_train(t, cid, ids, None, user0, item0, self._item_masks(t, ids, item0))
            stage.compute(t, "central", ops_n, "model", ms)
            gu += grad_user.flat()
            gv += grad_item.flat()
            losses.append(loss)
        k = len(plan.selected)
        new_user, su = adam_step(self._centralized["user"], user0, gu / k)
        new_item, sv = adam_step(self._centralized["item"], item0, gv / k)
        self._centralized = {"user": su, "item": sv}
        self.agg = replace(self.agg, user_params=new_user)
        self.server.item_params = new_item
        return self._commit(stage, plan, "centralized", float(np.mean(losses)), attempt)

    def _commit(self, stage: _Stage, plan: RoundPlan, mode: str, avg_loss: float, attempt: int) -> RoundReport:
        t = plan.round
        self.plans[t] = plan
        for entry in stage.ledger.entries:
            self.ledger._append(entry)
        for ent, ms in stage.ms.items():
            self.ledger.timing(t, ent, ms, Phase.TRAINING)
        if self.inspector is not None:
            for m in stage.messages:
                self.inspector.observe(m)
        for cid in plan.selected:
            self.clients[cid].user_params = self.agg.user_params
            self.clients[cid].user_embedding = None
        self.round = t + 1
        return RoundReport(
            round=t,
            mode=mode,
            avg_loss=float(avg_loss),
            selected=plan.selected,
            bytes=stage.ledger.bytes_by_entity(t),
            ops=stage.ledger.ops_by_entity(t),
            compute_ms={k: round(v, 3) for k, v in stage.ms.items()},
            attempt=attempt,
        )

    def step(self, mode: str = "split") -> RoundReport:
        """Run the next round, redrawing the client subset if a client fails."""
        runner = {"split": self.run_round, "naive": self.run_round_naive, "centralized": self.run_round_centralized}[mode]
        t = self.round
        for attempt in range(self.config.max_retries + 1):
            snapshot = (self.agg, self.server.item_params, self.server.opt, self._centralized)
            try:
                return runner(t, attempt)
            except RoundAborted as exc:
                self.agg, self.server.item_params, self.server.opt, self._centralized = snapshot
                log.warning("%s; retrying with a new client subset", exc)
        raise RoundAborted(t, f"gave up after {self.config.max_retries + 1} attempts")

    def train(
        self,
        rounds: int,
        mode: str = "split",
        *,
        eval_set: EvalSet | None = None,
        eval_every: int = 0,
        on_report: Callable[[RoundReport], None] | None = None,
    ) -> list[RoundReport]:
        reports = []
        for _ in range(rounds):
            report = self.step(mode)
            if eval_set is not None and eval_every and (report.round + 1) % eval_every == 0:
                report.eval = evaluate(self.scorer(), eval_set).as_dict()
            reports.append(report)
            if on_report is not None:
                on_report(report)
        return reports

    # -- inference ---------------------------------------------------------------

    def item_embeddings(self) -> np.ndarray:
        """Deterministic (no dropout) embeddings of the whole catalog."""
        ids = np.arange(len(self.catalog))
        emb, _ = tower_forward(self.server.item_params, self._item_inputs(ids))
        return emb

    def run_inference(self, mode: str = "split", clients: Sequence[int] | None = None, topk: int = 10) -> dict[int, list[int]]:
        """Online inference for ``clients`` with cost accounting in the inference phase.

        Split clients download catalog embeddings; naive clients download the
        raw catalog and run the item tower themselves. The item-tower pass a
        naive client performs is identical for every client, so it is run
        once and its measured op count is charged to each client.
        """
        clients = list(self.pool if clients is None else clients)
        stage = _Stage()
        t = self.round
        ph = Phase.INFERENCE
        ids = np.arange(len(self.catalog))
        start = time.perf_counter()
        with count_ops() as item_ops:
            emb = self.item_embeddings()
        item_ms = 1e3 * (time.perf_counter() - start)
        if mode == "split":
            stage.compute(t, REC_SERVER, item_ops.ops, "model", item_ms, ph)
            blob = encode_embeddings(t, ids, emb)
        else:
            blob = encode_raw_items(t, ids, self.catalog)
        ranked = {}
        user_params = self.agg.user_params
        for cid in clients:
            ent = client_entity(cid)
            if mode == "split":
                stage.send(t, REC_SERVER, ent, "item_embeddings", blob, {"item_embeddings": 8 * emb.size}, ph)
            else:
                stage.send(t, REC_SERVER, ent, "raw_items", blob, {"raw_items": int(self.catalog.raw_bytes.sum())}, ph)
            client = self.clients[cid]
            start = time.perf_counter()
            with count_ops() as ops:
                client.refresh_embedding(user_params)
                ranked[cid] = online_infer(client, ids, emb, topk)
            extra = item_ops.ops if mode != "split" else 0
            stage.compute(t, ent, ops.ops + extra, "model", 1e3 * (time.perf_counter() - start) + (item_ms if extra else 0.0), ph)
        for entry in stage.ledger.entries:
            self.ledger._append(entry)
        for ent, ms in stage.ms.items():
            self.ledger.timing(t, ent, ms, ph)
        if self.inspector is not None:
            for m in stage.messages:
                self.inspector.observe(m)
        return ranked

    # -- evaluation ------------------------------------------------------------

    def scorer(self, eval_clients: dict[int, np.ndarray] | None = None):
        """Cosine scorer over the current towers (no dropout) for :func:`evaluation.evaluate`."""
        emb = self.item_embeddings()
        user_params = self.agg.user_params
        cache: dict[int, np.ndarray] = {}

        def score(cid: int, candidates: np.ndarray) -> np.ndarray:
            if cid not in cache:
                feats = eval_clients[cid] if eval_clients and cid in eval_clients else self._features_for(cid)
                out, _ = tower_forward(user_params, _as_tower_input(user_params, feats))
                cache[cid] = out[0]
            return cosine_scores(cache[cid], emb[np.asarray(candidates)])

        return score

    def _features_for(self, cid: int) -> np.ndarray:
        if cid in self.clients:
            return self.clients[cid].features
        client = next((c for c in self.dataset.clients if c.cid == cid), None)
        if client is None:
            raise DataError(f"unknown client {cid}")
        text = user_text(client, self.catalog, self.config.user_feature_source)
        if Arch(self.config.arch) is Arch.CLSM:
            return stack_dense(encode_words(text, self.catalog.vocab, self.config.max_words), self.catalog.dim)
        return encode(text, self.catalog.vocab).to_dense()

    def snapshot(self) -> tuple[TowerParams, TowerParams]:
        return self.agg.user_params, self.server.item_params


def expected_cut_slots(config: FederationConfig, plan: RoundPlan, catalog_size: int) -> int:
    return catalog_size if config.cut_layout == "catalog" else int(plan.union().size)

